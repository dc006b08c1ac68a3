#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "routelab/intervention.hpp"
#include "routelab/parallel.hpp"
#include "routelab/trace.hpp"

namespace routelab {

// Token mixing applied before each MoE block; a stand-in for attention.
enum class Mixing { none, causal_mean };

std::string_view to_string(Mixing mixing);
Mixing parse_mixing(std::string_view text);

struct SimConfig {
  std::string model_name = "routelab-sim";
  int hidden_dim = 32;
  int num_layers = 12;
  int num_experts = 16;
  int top_k = 2;
  int vocab_size = 256;
  int expert_hidden_multiplier = 4;
  std::uint64_t seed = 0;
  Mixing mixing = Mixing::none;

  void validate() const;  // throws ConfigError
  // Aggregation is softmax over the selected logits, but the trace is
  // analysed with softmax_all by default.
  ModelSpec model_spec() const;
  bool operator==(const SimConfig&) const = default;
};

SimConfig sim_config_from_json(const std::string& text);
std::string sim_config_to_json(const SimConfig& config);
SimConfig read_sim_config_file(const std::filesystem::path& path);

// Immutable parameters of the simulated decoder stack. Every matrix is
// row-major and drawn uniformly from [-1/sqrt(d), 1/sqrt(d)] by a counter
// stream keyed on (seed, role, layer, expert).
class SimState {
 public:
  explicit SimState(const SimConfig& config);

  const SimConfig& config() const { return config_; }
  int expert_width() const { return config_.hidden_dim * config_.expert_hidden_multiplier; }

  std::span<const double> embedding(int token) const;
  // E x d
  std::span<const double> router(int layer) const;
  // (m*d) x d
  std::span<const double> w_in(int layer, int expert) const;
  // d x (m*d)
  std::span<const double> w_out(int layer, int expert) const;

  bool operator==(const SimState&) const = default;

 private:
  SimConfig config_;
  std::vector<double> embedding_;
  std::vector<double> router_;
  std::vector<double> w_in_;
  std::vector<double> w_out_;
};

SimState init_sim(const SimConfig& config);

struct CorpusEntry {
  SequenceMeta meta;
  std::vector<int> token_ids;
};

// Newline-delimited {"sequence_id","language_tag","domain_tag","pair_key","token_ids"}.
std::vector<CorpusEntry> read_corpus(std::istream& in);
std::vector<CorpusEntry> read_corpus_file(const std::filesystem::path& path);
std::string corpus_to_jsonl(const std::vector<CorpusEntry>& corpus);

struct ForwardResult {
  std::vector<double> hidden;  // length x d, row-major
  SequenceTrace trace;
};

// Runs one sequence through the stack. With a plan, router logits are edited
// before top-k selection and the aggregation softmax; the trace records the
// edited logits. Throws ConfigError if the plan does not fit the model.
ForwardResult forward(const SimState& state, const CorpusEntry& entry,
                      const InterventionPlan* plan = nullptr);

// Order- and thread-count-independent corpus run.
TraceSet run_corpus(const SimState& state, const std::vector<CorpusEntry>& corpus,
                    const InterventionPlan* plan = nullptr,
                    unsigned threads = default_thread_count());

// Indices of the k largest values, ties broken toward the lower index, in
// descending value order.
std::vector<int> top_k_indices(std::span<const double> values, int k);

}  // namespace routelab
