#include "routelab/trace_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "routelab/errors.hpp"

namespace routelab {

namespace {

// Float-typed JSON so logits parse straight to 32-bit without a double detour.
using trace_json = nlohmann::basic_json<std::map, std::vector, std::string, bool, std::int64_t,
                                        std::uint64_t, float>;

std::string quote(const std::string& text) {
  try {
    return nlohmann::json(text).dump();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("string is not valid UTF-8: ") + e.what());
  }
}

void append_float_array(std::string& out, std::span<const float> values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_float(values[i]);
  }
  out += ']';
}

void append_int_array(std::string& out, std::span<const std::int32_t> values) {
  out += '[';
  char buf[16];
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    auto res = std::to_chars(buf, buf + sizeof buf, values[i]);
    out.append(buf, res.ptr);
  }
  out += ']';
}

}  // namespace

std::string format_float(float value) {
  // "-0" would parse back as the integer 0 and lose its sign.
  if (value == 0.0f && std::signbit(value)) return "-0.0";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

TraceWriter::TraceWriter(std::ostream& out, const ModelSpec& spec) : out_(out), spec_(spec) {
  spec_.validate();
  std::string line = "{\"format_version\":" + std::to_string(kTraceFormatVersion) +
                     ",\"spec\":{\"model_name\":" + quote(spec_.model_name) +
                     ",\"num_layers\":" + std::to_string(spec_.num_layers) +
                     ",\"num_experts\":" + std::to_string(spec_.num_experts) +
                     ",\"top_k\":" + std::to_string(spec_.top_k) + ",\"norm_mode\":\"" +
                     std::string(to_string(spec_.norm_mode)) + "\"}}\n";
  emit(line);
}

void TraceWriter::emit(const std::string& line) {
  out_.write(line.data(), static_cast<std::streamsize>(line.size()));
  if (!out_) throw IoError("trace write failed after " + std::to_string(bytes_) + " bytes", bytes_);
  bytes_ += line.size();
}

void TraceWriter::write(const SequenceTrace& seq) {
  validate_sequence(seq, spec_);
  std::string line;
  line.reserve(64 + seq.length() * static_cast<std::size_t>(seq.num_layers()) *
                        static_cast<std::size_t>(seq.num_experts() * 12 + 32));
  line += "{\"sequence_id\":" + quote(seq.sequence_id());
  line += ",\"language_tag\":" + quote(seq.language_tag());
  line += ",\"domain_tag\":" + quote(seq.domain_tag());
  line += ",\"pair_key\":" + quote(seq.pair_key());
  line += ",\"tokens\":[";
  for (std::size_t t = 0; t < seq.length(); ++t) {
    if (t) line += ',';
    line += "{\"layers\":[";
    for (int l = 0; l < seq.num_layers(); ++l) {
      if (l) line += ',';
      const TokenRouting r = seq.at(t, l);
      if (r.compact()) {
        line += "{\"sel\":";
        append_int_array(line, r.selected);
        line += ",\"w\":";
        append_float_array(line, r.weights);
      } else {
        line += "{\"z\":";
        append_float_array(line, r.logits);
        line += ",\"sel\":";
        append_int_array(line, r.selected);
      }
      line += '}';
    }
    line += "]}";
  }
  line += "]}\n";
  emit(line);
}

TraceReader::TraceReader(std::istream& in) : in_(in) {
  std::string line;
  if (!read_line(line)) throw ParseError("missing header record", 1, 0, "");
  trace_json header;
  try {
    header = trace_json::parse(line);
  } catch (const trace_json::parse_error& e) {
    throw ParseError(e.what(), line_, offset_ + (e.byte > 0 ? e.byte - 1 : 0), "");
  }
  auto field = [&](const trace_json& obj, const char* name) -> const trace_json& {
    if (!obj.is_object() || !obj.contains(name))
      throw ParseError("missing field", line_, offset_, name);
    return obj.at(name);
  };
  try {
    const auto& version = field(header, "format_version");
    if (!version.is_number_integer() || version.get<int>() != kTraceFormatVersion)
      throw ParseError("unsupported format_version", line_, offset_, "format_version");
    const auto& s = field(header, "spec");
    spec_.model_name = field(s, "model_name").get<std::string>();
    spec_.num_layers = field(s, "num_layers").get<int>();
    spec_.num_experts = field(s, "num_experts").get<int>();
    spec_.top_k = field(s, "top_k").get<int>();
    spec_.norm_mode = parse_norm_mode(field(s, "norm_mode").get<std::string>());
  } catch (const trace_json::exception& e) {
    throw ParseError(e.what(), line_, offset_, "spec");
  }
  spec_.validate();
}

bool TraceReader::read_line(std::string& line) {
  while (true) {
    if (!std::getline(in_, line)) return false;
    offset_ = next_offset_;
    ++line_;
    last_line_unterminated_ = in_.eof();
    next_offset_ += line.size() + (last_line_unterminated_ ? 0 : 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) return true;
  }
}

std::optional<SequenceTrace> TraceReader::next() {
  std::string line;
  if (!read_line(line)) {
    if (in_.bad()) throw IoError("trace read failed", next_offset_);
    return std::nullopt;
  }

  trace_json rec;
  try {
    rec = trace_json::parse(line);
  } catch (const trace_json::parse_error& e) {
    const std::uint64_t at = offset_ + (e.byte > 0 ? e.byte - 1 : 0);
    throw ParseError(last_line_unterminated_ ? std::string("truncated record: ") + e.what() : e.what(),
                     line_, at, "");
  }
  if (!rec.is_object()) throw ParseError("record is not an object", line_, offset_, "");

  std::string current_field;
  auto field = [&](const trace_json& obj, const char* name) -> const trace_json& {
    current_field = name;
    if (!obj.is_object() || !obj.contains(name))
      throw ParseError("missing field", line_, offset_, name);
    return obj.at(name);
  };

  try {
    SequenceMeta meta;
    meta.sequence_id = field(rec, "sequence_id").get<std::string>();
    meta.language_tag = field(rec, "language_tag").get<std::string>();
    meta.domain_tag = field(rec, "domain_tag").get<std::string>();
    meta.pair_key = field(rec, "pair_key").get<std::string>();
    const auto& tokens = field(rec, "tokens");
    if (!tokens.is_array()) throw ParseError("expected array", line_, offset_, "tokens");
    const std::string id = meta.sequence_id;
    auto fail = [&](const std::string& what) {
      throw ValidationError("sequence '" + id + "': " + what);
    };
    if (tokens.empty()) fail("sequence has no tokens");

    bool compact = false;
    {
      const auto& layers0 = field(tokens.front(), "layers");
      if (!layers0.is_array() || layers0.empty())
        fail("token 0 does not cover all layers");
      compact = !layers0.front().contains("z");
    }
    if (compact_mode_ >= 0 && compact != (compact_mode_ == 1))
      fail("mixes compact and full records within one trace");
    compact_mode_ = compact ? 1 : 0;

    SequenceTrace seq(std::move(meta), spec_, tokens.size(), compact);
    const auto e = static_cast<std::size_t>(spec_.num_experts);
    const auto k = static_cast<std::size_t>(spec_.top_k);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto& layers = field(tokens[t], "layers");
      if (!layers.is_array() || layers.size() != static_cast<std::size_t>(spec_.num_layers))
        fail("token " + std::to_string(t) + " covers " +
             std::to_string(layers.is_array() ? layers.size() : 0) + " layers, expected " +
             std::to_string(spec_.num_layers));
      for (int l = 0; l < spec_.num_layers; ++l) {
        const auto& lr = layers[static_cast<std::size_t>(l)];
        const std::string where = " at token " + std::to_string(t) + ", layer " + std::to_string(l);
        if (lr.is_object() && lr.contains("z") == compact)
          fail("mixes compact and full layer records" + where);
        const auto& sel = field(lr, "sel");
        if (!sel.is_array() || sel.size() != k)
          fail("expected " + std::to_string(k) + " selected experts, got " +
               std::to_string(sel.is_array() ? sel.size() : 0) + where);
        auto sel_out = seq.selected(t, l);
        for (std::size_t i = 0; i < k; ++i) {
          if (!sel[i].is_number_integer()) throw ParseError("expected integer", line_, offset_, "sel");
          sel_out[i] = sel[i].get<std::int32_t>();
        }
        const auto& values = field(lr, compact ? "w" : "z");
        const std::size_t want = compact ? k : e;
        if (!values.is_array() || values.size() != want)
          fail(std::string(compact ? "w" : "z") + " has " +
               std::to_string(values.is_array() ? values.size() : 0) + " entries, expected " +
               std::to_string(want) + where);
        auto out = compact ? seq.weights(t, l) : seq.logits(t, l);
        for (std::size_t i = 0; i < want; ++i) {
          if (!values[i].is_number())
            throw ParseError("expected number", line_, offset_, compact ? "w" : "z");
          out[i] = values[i].get<float>();
        }
      }
    }
    validate_sequence(seq, spec_);
    return seq;
  } catch (const trace_json::exception& ex) {
    throw ParseError(ex.what(), line_, offset_, current_field);
  }
}

std::uint64_t write_trace(const TraceSet& set, std::ostream& out) {
  TraceWriter writer(out, set.spec);
  for (const auto& seq : set.sequences) writer.write(seq);
  out.flush();
  if (!out) throw IoError("trace flush failed", writer.bytes_written());
  return writer.bytes_written();
}

TraceSet read_trace(std::istream& in) {
  TraceReader reader(in);
  TraceSet set;
  set.spec = reader.spec();
  while (auto seq = reader.next()) set.sequences.push_back(std::move(*seq));
  validate_trace_set(set);
  return set;
}

std::uint64_t write_trace_file(const TraceSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return write_trace(set, out);
}

TraceSet read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return read_trace(in);
}

}  // namespace routelab
