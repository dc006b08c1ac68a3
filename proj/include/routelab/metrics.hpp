#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "routelab/trace.hpp"

namespace routelab {

// Mean-pooled routing weights of one sequence at one layer.
struct ExpertImportance {
  int layer = 0;
  std::vector<double> values;
};

struct DivergenceProfile {
  std::string language_tag;
  std::vector<double> mean_hjs;  // per layer, each in [0, 1]
  std::size_t n_pairs = 0;
  std::size_t n_unpaired = 0;    // sequences on either side without a partner
};

struct EntropyProfile {
  std::string language_tag;
  std::vector<double> mean_entropy;  // nats, per layer
  std::size_t n_tokens = 0;
};

struct ConsistencyProfile {
  std::string language_tag;
  std::vector<double> mean_jaccard;  // per layer
  std::size_t n_sequences = 0;
  std::size_t n_skipped = 0;         // sequences shorter than two tokens
  std::size_t pairs_sampled = 0;     // token pairs evaluated per layer, summed over sequences
};

ExpertImportance expert_importance(const SequenceTrace& seq, int layer, const ModelSpec& spec);

// Mean of expert_importance over a slice; order of the slice does not matter.
std::vector<double> corpus_importance(const TraceSlice& slice, int layer, const ModelSpec& spec);

// Shannon entropy in nats with 0 ln 0 = 0.
double entropy(std::span<const double> p);

inline constexpr double kHjsDenominatorFloor = 1e-12;
inline constexpr double kHjsZeroClamp = 1e-12;
inline constexpr double kNormalizationTolerance = 1e-6;

// Jensen-Shannon divergence divided by ln E minus the mean entropy of the two
// inputs, clamped to [0, 1]. Throws DomainError on non-normalized input.
double hjs_divergence(std::span<const double> q1, std::span<const double> q2);

// Pairs sequences by (domain_tag, pair_key) and averages per-layer divergence
// between reference and comparison importance distributions.
DivergenceProfile divergence_profile(const TraceSlice& ref, const TraceSlice& cmp,
                                     const ModelSpec& spec);

// Unpaired variant: average importance within each slice first, then compare.
double corpus_divergence(const TraceSlice& a, const TraceSlice& b, int layer, const ModelSpec& spec);

EntropyProfile entropy_profile(const TraceSlice& slice, const ModelSpec& spec);

inline constexpr std::size_t kDefaultConsistencyPairs = 500;

double jaccard(std::span<const std::int32_t> a, std::span<const std::int32_t> b);

// Token pairs (a < b) used for one sequence: every pair when there are at most
// `pairs` of them, otherwise `pairs` distinct pairs drawn without replacement.
std::vector<std::pair<std::size_t, std::size_t>> consistency_pairs(std::size_t length,
                                                                   std::size_t pairs,
                                                                   std::uint64_t seed);

// Seed for one sequence's pair sample, derived from its identity so that
// results do not depend on where the sequence sits in the corpus.
std::uint64_t sequence_seed(const SequenceTrace& seq, std::uint64_t seed);

ConsistencyProfile consistency_profile(const TraceSlice& slice, const ModelSpec& spec,
                                       std::size_t pairs = kDefaultConsistencyPairs,
                                       std::uint64_t seed = 0);

// Pearson product-moment correlation.
double correlate(std::span<const double> xs, std::span<const double> ys);

std::string divergence_csv(const std::vector<DivergenceProfile>& profiles);
std::string entropy_csv(const std::vector<EntropyProfile>& profiles);
std::string consistency_csv(const std::vector<ConsistencyProfile>& profiles);

}  // namespace routelab
