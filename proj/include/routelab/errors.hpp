#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace routelab {

// Base of every error the library throws. The CLI maps IoError to exit
// code 3 and every other Error to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text. `line` is 1-based, `offset` is the absolute byte
// offset into the stream where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t line, std::uint64_t offset,
             std::string field)
      : Error("parse error at line " + std::to_string(line) + ", offset " +
              std::to_string(offset) + (field.empty() ? "" : " (field '" + field + "')") +
              ": " + what),
        line_(line),
        offset_(offset),
        field_(std::move(field)) {}

  std::uint64_t line() const { return line_; }
  std::uint64_t offset() const { return offset_; }
  const std::string& field() const { return field_; }

 private:
  std::uint64_t line_;
  std::uint64_t offset_;
  std::string field_;
};

// Well-formed input that violates a data-model invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Inconsistent shapes or parameters (plan vs model, pools, deltas).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation needs data the trace does not carry (compact traces have no logits).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Numeric precondition failure (non-normalized distributions, tau <= 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A paired statistic ended up with nothing to average.
class EmptyProfileError : public Error {
 public:
  using Error::Error;
};

class UndefinedCorrelationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::uint64_t position = 0)
      : Error(what), position_(position) {}
  // Bytes successfully written (or read) before the failure.
  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t position_;
};

}  // namespace routelab
