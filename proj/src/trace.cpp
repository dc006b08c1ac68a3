#include "routelab/trace.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>
#include <utility>

#include "routelab/errors.hpp"

namespace routelab {

std::string_view to_string(NormMode mode) {
  return mode == NormMode::softmax_all ? "softmax_all" : "softmax_topk";
}

NormMode parse_norm_mode(std::string_view text) {
  if (text == "softmax_all") return NormMode::softmax_all;
  if (text == "softmax_topk") return NormMode::softmax_topk;
  throw ValidationError("unknown norm_mode '" + std::string(text) + "'");
}

void ModelSpec::validate() const {
  if (num_layers < 1) throw ValidationError("num_layers must be >= 1");
  if (num_experts < 1) throw ValidationError("num_experts must be >= 1");
  if (top_k < 1 || top_k > num_experts)
    throw ValidationError("top_k must satisfy 1 <= top_k <= num_experts");
}

SequenceTrace::SequenceTrace(SequenceMeta meta, const ModelSpec& spec, std::size_t num_tokens,
                             bool compact)
    : meta_(std::move(meta)),
      num_tokens_(num_tokens),
      num_layers_(spec.num_layers),
      num_experts_(spec.num_experts),
      top_k_(spec.top_k),
      compact_(compact) {
  const std::size_t slots = num_tokens * static_cast<std::size_t>(num_layers_);
  if (!compact_) logits_.assign(slots * static_cast<std::size_t>(num_experts_), 0.0f);
  selected_.assign(slots * static_cast<std::size_t>(top_k_), 0);
  if (compact_) weights_.assign(slots * static_cast<std::size_t>(top_k_), 0.0f);
}

std::size_t SequenceTrace::slot(std::size_t token, int layer) const {
  return token * static_cast<std::size_t>(num_layers_) + static_cast<std::size_t>(layer);
}

TokenRouting SequenceTrace::at(std::size_t token, int layer) const {
  const std::size_t s = slot(token, layer);
  const auto e = static_cast<std::size_t>(num_experts_);
  const auto k = static_cast<std::size_t>(top_k_);
  TokenRouting r;
  if (!compact_) r.logits = std::span<const float>(logits_).subspan(s * e, e);
  r.selected = std::span<const std::int32_t>(selected_).subspan(s * k, k);
  if (compact_) r.weights = std::span<const float>(weights_).subspan(s * k, k);
  return r;
}

std::span<float> SequenceTrace::logits(std::size_t token, int layer) {
  if (compact_) return {};
  const auto e = static_cast<std::size_t>(num_experts_);
  return std::span<float>(logits_).subspan(slot(token, layer) * e, e);
}

std::span<std::int32_t> SequenceTrace::selected(std::size_t token, int layer) {
  const auto k = static_cast<std::size_t>(top_k_);
  return std::span<std::int32_t>(selected_).subspan(slot(token, layer) * k, k);
}

std::span<float> SequenceTrace::weights(std::size_t token, int layer) {
  if (!compact_) return {};
  const auto k = static_cast<std::size_t>(top_k_);
  return std::span<float>(weights_).subspan(slot(token, layer) * k, k);
}

bool TraceSet::compact() const {
  return std::any_of(sequences.begin(), sequences.end(),
                     [](const SequenceTrace& s) { return s.compact(); });
}

bool SliceSelector::matches(const SequenceTrace& seq) const {
  auto ok = [](const std::string& pattern, const std::string& value) {
    return pattern.empty() || pattern == "*" || pattern == value;
  };
  return ok(language, seq.language_tag()) && ok(domain, seq.domain_tag());
}

SliceSelector SliceSelector::parse(std::string_view text) {
  SliceSelector sel;
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    sel.language = std::string(text);
  } else {
    sel.language = std::string(text.substr(0, colon));
    sel.domain = std::string(text.substr(colon + 1));
  }
  return sel;
}

TraceSlice select(const TraceSet& set, const SliceSelector& selector) {
  TraceSlice out;
  for (const auto& seq : set.sequences)
    if (selector.matches(seq)) out.push_back(&seq);
  return out;
}

TraceSlice all_sequences(const TraceSet& set) { return select(set, SliceSelector{}); }

std::vector<std::string> language_tags(const TraceSet& set) {
  std::vector<std::string> tags;
  for (const auto& seq : set.sequences)
    if (std::find(tags.begin(), tags.end(), seq.language_tag()) == tags.end())
      tags.push_back(seq.language_tag());
  return tags;
}

void validate_sequence(const SequenceTrace& seq, const ModelSpec& spec) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("sequence '" + seq.sequence_id() + "': " + what);
  };
  if (seq.sequence_id().empty()) fail("empty sequence_id");
  if (seq.language_tag().empty()) fail("empty language_tag");
  if (seq.domain_tag().empty()) fail("empty domain_tag");
  if (seq.length() < 1) fail("sequence has no tokens");
  if (seq.num_layers() != spec.num_layers || seq.num_experts() != spec.num_experts ||
      seq.top_k() != spec.top_k)
    fail("shape does not match model spec");

  std::vector<char> seen(static_cast<std::size_t>(spec.num_experts));
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (int l = 0; l < spec.num_layers; ++l) {
      const TokenRouting r = seq.at(t, l);
      const std::string where = " at token " + std::to_string(t) + ", layer " + std::to_string(l);
      for (float z : r.logits)
        if (!std::isfinite(z)) fail("non-finite logit" + where);
      for (float w : r.weights)
        if (!std::isfinite(w) || w < 0.0f) fail("invalid weight" + where);
      std::fill(seen.begin(), seen.end(), 0);
      for (std::int32_t e : r.selected) {
        if (e < 0 || e >= spec.num_experts) fail("selected expert out of range" + where);
        if (seen[static_cast<std::size_t>(e)]) fail("duplicate selected expert" + where);
        seen[static_cast<std::size_t>(e)] = 1;
      }
    }
  }
}

void validate_trace_set(const TraceSet& set) {
  set.spec.validate();
  std::set<std::tuple<std::string, std::string, std::string>> keys;
  for (const auto& seq : set.sequences) {
    validate_sequence(seq, set.spec);
    if (seq.pair_key().empty()) continue;
    if (!keys.emplace(seq.language_tag(), seq.domain_tag(), seq.pair_key()).second)
      throw ValidationError("sequence '" + seq.sequence_id() + "': duplicate pair_key '" +
                            seq.pair_key() + "' within " + seq.language_tag() + "/" +
                            seq.domain_tag());
  }
}

void routing_weights(const TokenRouting& routing, const ModelSpec& spec, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  if (routing.compact()) {
    if (spec.norm_mode == NormMode::softmax_all)
      throw CapabilityError("compact trace has no logits; softmax_all weights unavailable");
    double total = 0.0;
    for (float w : routing.weights) total += w;
    for (std::size_t i = 0; i < routing.selected.size(); ++i)
      out[static_cast<std::size_t>(routing.selected[i])] =
          total > 0.0 ? routing.weights[i] / total : 1.0 / static_cast<double>(routing.selected.size());
    return;
  }

  if (spec.norm_mode == NormMode::softmax_all) {
    double peak = routing.logits[0];
    for (float z : routing.logits) peak = std::max(peak, static_cast<double>(z));
    double total = 0.0;
    for (std::size_t i = 0; i < routing.logits.size(); ++i) {
      out[i] = std::exp(static_cast<double>(routing.logits[i]) - peak);
      total += out[i];
    }
    for (double& p : out) p /= total;
    return;
  }

  double peak = routing.logits[static_cast<std::size_t>(routing.selected[0])];
  for (std::int32_t e : routing.selected)
    peak = std::max(peak, static_cast<double>(routing.logits[static_cast<std::size_t>(e)]));
  double total = 0.0;
  for (std::int32_t e : routing.selected) {
    const auto i = static_cast<std::size_t>(e);
    out[i] = std::exp(static_cast<double>(routing.logits[i]) - peak);
    total += out[i];
  }
  for (std::int32_t e : routing.selected) out[static_cast<std::size_t>(e)] /= total;
}

std::vector<double> routing_weights(const TokenRouting& routing, const ModelSpec& spec) {
  std::vector<double> out(static_cast<std::size_t>(spec.num_experts));
  routing_weights(routing, spec, out);
  return out;
}

namespace {

struct Preset {
  const char* key;
  ModelSpec spec;
};

const std::vector<Preset>& presets() {
  static const std::vector<Preset> table = {
      {"olmoe", {"OLMoE-1B-7B-0125-Instruct", 16, 64, 8, NormMode::softmax_all}},
      {"phi", {"Phi-3.5-MoE-instruct", 32, 16, 2, NormMode::softmax_all}},
      {"gpt-oss", {"gpt-oss-20b", 24, 32, 4, NormMode::softmax_all}},
      {"qwen3", {"Qwen3-30B-A3B", 48, 128, 8, NormMode::softmax_all}},
  };
  return table;
}

}  // namespace

std::optional<ModelSpec> model_preset(std::string_view name) {
  for (const auto& p : presets())
    if (name == p.key) return p.spec;
  return std::nullopt;
}

std::vector<std::string> model_preset_names() {
  std::vector<std::string> names;
  for (const auto& p : presets()) names.emplace_back(p.key);
  return names;
}

}  // namespace routelab
