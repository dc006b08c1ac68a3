#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "routelab/layer_range.hpp"
#include "routelab/trace.hpp"

namespace routelab {

struct PlantedLanguage {
  std::string tag;
  double proficiency = 1.0;     // in [0, 1]
  std::vector<int> outer_pool;  // favored outside the middle band
};

// Extra task corpus (e.g. "math"): its sequences get `boost` added to the
// task-pool logits on every layer.
struct PlantedDomain {
  std::string tag;
  std::vector<int> task_pool;
  double boost = 4.0;
  std::vector<std::string> languages;  // empty: reference language only
};

// Synthetic multilingual routing world with known ground truth.
//
// Per token and layer the logit of expert e is
//
//   b_l * [e favored] + boost * [e in task pool]
//     + shared_noise * g_pair + jitter_scale * g_lang
//
// where b_l = base_logit + concentration_slope * l, the favored pool is the
// shared pool inside the middle band and the language's outer pool outside
// it, g_pair is standard normal noise common to every language for the same
// pair index, and g_lang is language-specific noise. jitter_scale is
// alignment_noise * (1 - proficiency) inside the middle band and 0 outside.
struct PlantedSpec {
  ModelSpec spec;
  std::vector<PlantedLanguage> languages;
  std::string reference;  // tag; empty means the first language with proficiency 1
  int num_pairs = 1;
  int tokens_per_sequence = 1;
  LayerRange middle_band;
  std::vector<int> shared_pool;
  double alignment_noise = 0.0;
  double shared_noise = 1.0;
  double base_logit = 4.0;
  double concentration_slope = 0.0;
  std::string generic_domain = "generic";
  std::vector<PlantedDomain> domains;
  std::uint64_t seed = 0;

  // Throws ConfigError (pools out of range or overlapping, bad band, ...).
  void validate() const;
  const PlantedLanguage& reference_language() const;
};

// 8 languages with proficiencies 1.0, 0.9, ..., 0.3; 12 layers, E=16, K=2,
// middle band 4..8; a "math" task domain on experts disjoint from every
// language pool.
PlantedSpec default_planted_spec();

PlantedSpec planted_spec_from_json(const std::string& text);
std::string planted_spec_to_json(const PlantedSpec& planted);
PlantedSpec read_planted_spec_file(const std::filesystem::path& path);

TraceSet generate(const PlantedSpec& planted);

}  // namespace routelab
