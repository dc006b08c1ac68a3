#pragma once

#include <optional>
#include <string>
#include <vector>

#include "routelab/layer_range.hpp"
#include "routelab/trace.hpp"

namespace routelab {

// Mean over sequences of (activation count / sequence length), per layer and expert.
struct ActivationFrequency {
  int num_layers = 0;
  int num_experts = 0;
  int top_k = 0;
  std::size_t num_sequences = 0;
  std::vector<double> values;  // layer-major

  double at(int layer, int expert) const {
    return values[static_cast<std::size_t>(layer * num_experts + expert)];
  }
};

// Target-minus-baseline activation frequencies.
struct DeltaProfile {
  int num_layers = 0;
  int num_experts = 0;
  std::string target_label;
  std::string baseline_label;
  std::vector<double> values;  // layer-major

  double at(int layer, int expert) const {
    return values[static_cast<std::size_t>(layer * num_experts + expert)];
  }
};

struct ExpertMember {
  int layer = 0;
  int expert = 0;
  double delta = 0.0;

  bool operator==(const ExpertMember&) const = default;
};

struct ExpertSet {
  std::string label;
  double tau = 0.0;
  std::vector<ExpertMember> members;  // sorted by (layer, expert)
};

struct ExpertKey {
  int layer = 0;
  int expert = 0;

  auto operator<=>(const ExpertKey&) const = default;
};

ActivationFrequency activation_frequency(const TraceSlice& slice, const ModelSpec& spec);

// Elementwise target - baseline. Throws ConfigError on shape mismatch.
DeltaProfile delta(const ActivationFrequency& target, const ActivationFrequency& baseline,
                   std::string target_label = "target", std::string baseline_label = "baseline");

// Every (layer, expert) with delta strictly greater than tau.
ExpertSet select_experts(const DeltaProfile& dp, double tau,
                         const std::optional<LayerRange>& layers = std::nullopt,
                         std::string label = {});

// Union over languages of select_experts; each member keeps its largest delta.
ExpertSet multilingual_union(const std::vector<DeltaProfile>& per_language, double tau,
                             const std::optional<LayerRange>& layers = std::nullopt,
                             std::string label = "multilingual");

std::vector<ExpertKey> overlap(const ExpertSet& a, const ExpertSet& b);

std::string expert_set_to_json(const ExpertSet& set);
ExpertSet expert_set_from_json(const std::string& text);

// CSV rows "layer,expert,delta".
std::string delta_to_csv(const DeltaProfile& dp);

}  // namespace routelab
