#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace routelab {

// How the source model turns router logits into aggregation weights.
enum class NormMode { softmax_all, softmax_topk };

std::string_view to_string(NormMode mode);
NormMode parse_norm_mode(std::string_view text);

struct ModelSpec {
  std::string model_name;
  int num_layers = 1;
  int num_experts = 1;
  int top_k = 1;
  NormMode norm_mode = NormMode::softmax_all;

  // Throws ValidationError if the invariants do not hold.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

// Router output for one token at one layer. Full records carry E logits;
// compact records carry only the K post-normalization weights.
struct TokenRouting {
  std::span<const float> logits;
  std::span<const std::int32_t> selected;
  std::span<const float> weights;

  bool compact() const { return logits.empty(); }
};

struct SequenceMeta {
  std::string sequence_id;
  std::string language_tag;
  std::string domain_tag;
  std::string pair_key;

  bool operator==(const SequenceMeta&) const = default;
};

// Per-token, per-layer routing records of one sequence. Storage is flat:
// token-major, then layer, then expert (or selected slot).
class SequenceTrace {
 public:
  SequenceTrace() = default;
  SequenceTrace(SequenceMeta meta, const ModelSpec& spec, std::size_t num_tokens,
                bool compact = false);

  const SequenceMeta& meta() const { return meta_; }
  const std::string& sequence_id() const { return meta_.sequence_id; }
  const std::string& language_tag() const { return meta_.language_tag; }
  const std::string& domain_tag() const { return meta_.domain_tag; }
  const std::string& pair_key() const { return meta_.pair_key; }
  void set_sequence_id(std::string id) { meta_.sequence_id = std::move(id); }

  std::size_t length() const { return num_tokens_; }
  int num_layers() const { return num_layers_; }
  int num_experts() const { return num_experts_; }
  int top_k() const { return top_k_; }
  bool compact() const { return compact_; }

  TokenRouting at(std::size_t token, int layer) const;

  std::span<float> logits(std::size_t token, int layer);
  std::span<std::int32_t> selected(std::size_t token, int layer);
  std::span<float> weights(std::size_t token, int layer);

  bool operator==(const SequenceTrace&) const = default;

 private:
  std::size_t slot(std::size_t token, int layer) const;

  SequenceMeta meta_;
  std::size_t num_tokens_ = 0;
  int num_layers_ = 0;
  int num_experts_ = 0;
  int top_k_ = 0;
  bool compact_ = false;
  std::vector<float> logits_;
  std::vector<std::int32_t> selected_;
  std::vector<float> weights_;
};

struct TraceSet {
  ModelSpec spec;
  std::vector<SequenceTrace> sequences;

  std::size_t size() const { return sequences.size(); }
  bool compact() const;

  bool operator==(const TraceSet&) const = default;
};

// Non-owning selection of sequences from one or more TraceSets.
using TraceSlice = std::vector<const SequenceTrace*>;

// Matches on language and domain; an empty or "*" pattern matches anything.
struct SliceSelector {
  std::string language;
  std::string domain;

  bool matches(const SequenceTrace& seq) const;
  // Parses "lang", "lang:domain", "*:domain".
  static SliceSelector parse(std::string_view text);
};

TraceSlice select(const TraceSet& set, const SliceSelector& selector);
TraceSlice all_sequences(const TraceSet& set);

// Distinct language tags in first-appearance order.
std::vector<std::string> language_tags(const TraceSet& set);

// Throws ValidationError naming the sequence when a record breaks an invariant.
void validate_sequence(const SequenceTrace& seq, const ModelSpec& spec);
void validate_trace_set(const TraceSet& set);

// Length-E probability vector for one token. softmax_all normalizes over every
// logit; softmax_topk normalizes over the selected logits and leaves zeros
// elsewhere. Compact records are only usable under softmax_topk.
std::vector<double> routing_weights(const TokenRouting& routing, const ModelSpec& spec);
void routing_weights(const TokenRouting& routing, const ModelSpec& spec, std::span<double> out);

// Published shape presets: olmoe, phi, gpt-oss, qwen3.
std::optional<ModelSpec> model_preset(std::string_view name);
std::vector<std::string> model_preset_names();

}  // namespace routelab
