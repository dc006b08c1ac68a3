#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "routelab/experts.hpp"
#include "routelab/layer_range.hpp"
#include "routelab/rng.hpp"

namespace routelab {

enum class InterventionMode { soft, hard };
enum class Direction { activate, deactivate };

std::string_view to_string(InterventionMode mode);
std::string_view to_string(Direction direction);
InterventionMode parse_intervention_mode(std::string_view text);
Direction parse_direction(std::string_view text);

inline constexpr double kDefaultPerturbationSigma = 1e-3;
inline constexpr double kMaxSoftLambda = 4.0;

struct Directive {
  LayerRange layers;
  std::vector<int> experts;
  InterventionMode mode = InterventionMode::soft;
  Direction direction = Direction::activate;
  double lambda = 0.0;  // soft only
};

// Router-logit edits applied before top-k selection and the aggregation softmax.
struct InterventionPlan {
  std::vector<Directive> directives;
  double perturbation_sigma = kDefaultPerturbationSigma;
  std::uint64_t rng_seed = 0;

  bool empty() const { return directives.empty(); }
  bool touches(int layer) const;

  // Checks that hold for any model: finite |lambda| <= 4, sigma >= 0, no two
  // directives editing the same (layer, expert). Throws ConfigError naming the
  // offending directive.
  void validate() const;

  // validate() plus shape checks against a model: layer ranges inside depth,
  // expert indices below num_experts, and fewer than E - K hard-deactivated
  // experts on any layer.
  void validate_for(int num_layers, int num_experts, int top_k) const;
};

// Population statistics of one token's logits.
struct LogitStats {
  double std = 0.0;
  double max = 0.0;
  double min = 0.0;
};

LogitStats logit_stats(std::span<const double> z);

// z'_k = z_k + lambda * s(z); every other coordinate is copied untouched.
std::vector<double> apply_soft(std::span<const double> z, int k, double lambda);

// z'_k = max(z) + |eps| (activate) or min(z) - |eps| (deactivate), with
// eps ~ Normal(0, sigma^2) drawn from rng.
std::vector<double> apply_hard(std::span<const double> z, int k, Direction direction, Rng& rng,
                               double sigma = kDefaultPerturbationSigma);

// Identifies one (token, layer) routing decision so perturbations are
// reproducible regardless of execution order.
struct TokenKey {
  std::uint64_t sequence_hash = 0;
  std::uint64_t token = 0;
};

// Applies every directive covering `layer`, in listed order, into `out`.
// All directives read statistics from the unmodified z.
void apply_plan(const InterventionPlan& plan, int layer, std::span<const double> z,
                std::span<double> out, const TokenKey& key);
std::vector<double> apply_plan(const InterventionPlan& plan, int layer, std::span<const double> z,
                               const TokenKey& key);

// One directive per distinct contiguous layer run; experts sharing the same run
// are grouped into that directive.
InterventionPlan build_plan(const ExpertSet& experts, InterventionMode mode, Direction direction,
                            double lambda, const std::optional<LayerRange>& layers = std::nullopt,
                            std::uint64_t rng_seed = 0,
                            double perturbation_sigma = kDefaultPerturbationSigma);

std::string plan_to_json(const InterventionPlan& plan);
InterventionPlan plan_from_json(const std::string& text);
InterventionPlan read_plan_file(const std::filesystem::path& path);

}  // namespace routelab
