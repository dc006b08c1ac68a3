#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "routelab/trace.hpp"

namespace routelab {

inline constexpr int kTraceFormatVersion = 1;

// Newline-delimited JSON trace writer. The header line is emitted on
// construction; every write() appends one sequence line.
class TraceWriter {
 public:
  TraceWriter(std::ostream& out, const ModelSpec& spec);

  void write(const SequenceTrace& seq);
  std::uint64_t bytes_written() const { return bytes_; }

 private:
  void emit(const std::string& line);

  std::ostream& out_;
  ModelSpec spec_;
  std::uint64_t bytes_ = 0;
};

// Single-consumer streaming reader. Each sequence is validated against the
// header spec as it is decoded.
class TraceReader {
 public:
  explicit TraceReader(std::istream& in);

  const ModelSpec& spec() const { return spec_; }
  std::optional<SequenceTrace> next();
  std::uint64_t line() const { return line_; }

 private:
  bool read_line(std::string& line);

  std::istream& in_;
  ModelSpec spec_;
  std::uint64_t line_ = 0;
  std::uint64_t offset_ = 0;       // start of the line most recently read
  std::uint64_t next_offset_ = 0;  // start of the next line
  bool last_line_unterminated_ = false;
  int compact_mode_ = -1;  // fixed by the first record: 0 full, 1 compact
};

std::uint64_t write_trace(const TraceSet& set, std::ostream& out);
TraceSet read_trace(std::istream& in);

std::uint64_t write_trace_file(const TraceSet& set, const std::filesystem::path& path);
TraceSet read_trace_file(const std::filesystem::path& path);

// Shortest decimal text that parses back to exactly `value`.
std::string format_float(float value);
std::string format_double(double value);

}  // namespace routelab
