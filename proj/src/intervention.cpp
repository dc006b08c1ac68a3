#include "routelab/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "routelab/errors.hpp"

namespace routelab {

std::string_view to_string(InterventionMode mode) {
  return mode == InterventionMode::soft ? "soft" : "hard";
}

std::string_view to_string(Direction direction) {
  return direction == Direction::activate ? "activate" : "deactivate";
}

InterventionMode parse_intervention_mode(std::string_view text) {
  if (text == "soft") return InterventionMode::soft;
  if (text == "hard") return InterventionMode::hard;
  throw ConfigError("unknown intervention mode '" + std::string(text) + "'");
}

Direction parse_direction(std::string_view text) {
  if (text == "activate") return Direction::activate;
  if (text == "deactivate") return Direction::deactivate;
  throw ConfigError("unknown direction '" + std::string(text) + "'");
}

bool InterventionPlan::touches(int layer) const {
  return std::any_of(directives.begin(), directives.end(),
                     [&](const Directive& d) { return d.layers.contains(layer); });
}

namespace {

std::string directive_name(std::size_t i) { return "directive #" + std::to_string(i); }

}  // namespace

void InterventionPlan::validate() const {
  if (!std::isfinite(perturbation_sigma) || perturbation_sigma < 0.0)
    throw ConfigError("perturbation_sigma must be finite and >= 0");
  std::set<std::pair<int, int>> edited;
  for (std::size_t i = 0; i < directives.size(); ++i) {
    const Directive& d = directives[i];
    if (d.layers.first < 0 || d.layers.first > d.layers.last)
      throw ConfigError(directive_name(i) + ": invalid layer range " + d.layers.str());
    if (d.mode == InterventionMode::soft &&
        (!std::isfinite(d.lambda) || std::abs(d.lambda) > kMaxSoftLambda))
      throw ConfigError(directive_name(i) + ": soft lambda must be finite with |lambda| <= 4");
    for (int e : d.experts) {
      if (e < 0) throw ConfigError(directive_name(i) + ": negative expert index");
      for (int l = d.layers.first; l <= d.layers.last; ++l)
        if (!edited.emplace(l, e).second)
          throw ConfigError(directive_name(i) + ": expert " + std::to_string(e) + " at layer " +
                            std::to_string(l) + " is already targeted by another directive");
    }
  }
}

void InterventionPlan::validate_for(int num_layers, int num_experts, int top_k) const {
  validate();
  std::map<int, int> suppressed;
  for (std::size_t i = 0; i < directives.size(); ++i) {
    const Directive& d = directives[i];
    if (!d.layers.valid_for(num_layers))
      throw ConfigError(directive_name(i) + ": layers " + d.layers.str() +
                        " outside model depth " + std::to_string(num_layers));
    for (int e : d.experts)
      if (e >= num_experts)
        throw ConfigError(directive_name(i) + ": expert " + std::to_string(e) +
                          " >= num_experts " + std::to_string(num_experts));
    if (d.mode == InterventionMode::hard && d.direction == Direction::deactivate)
      for (int l = d.layers.first; l <= d.layers.last; ++l)
        suppressed[l] += static_cast<int>(d.experts.size());
  }
  for (const auto& [layer, count] : suppressed)
    if (count >= num_experts - top_k)
      throw ConfigError("layer " + std::to_string(layer) + ": " + std::to_string(count) +
                        " hard-deactivated experts leaves too few for top-" +
                        std::to_string(top_k) + " of " + std::to_string(num_experts));
}

LogitStats logit_stats(std::span<const double> z) {
  LogitStats s;
  if (z.empty()) return s;
  double mean = 0.0;
  s.max = z[0];
  s.min = z[0];
  for (double v : z) {
    mean += v;
    s.max = std::max(s.max, v);
    s.min = std::min(s.min, v);
  }
  mean /= static_cast<double>(z.size());
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  s.std = std::sqrt(var / static_cast<double>(z.size()));
  return s;
}

std::vector<double> apply_soft(std::span<const double> z, int k, double lambda) {
  std::vector<double> out(z.begin(), z.end());
  out[static_cast<std::size_t>(k)] += lambda * logit_stats(z).std;
  return out;
}

namespace {

double hard_value(const LogitStats& stats, Direction direction, double eps) {
  return direction == Direction::activate ? stats.max + std::abs(eps) : stats.min - std::abs(eps);
}

}  // namespace

std::vector<double> apply_hard(std::span<const double> z, int k, Direction direction, Rng& rng,
                               double sigma) {
  std::vector<double> out(z.begin(), z.end());
  out[static_cast<std::size_t>(k)] = hard_value(logit_stats(z), direction, sigma * rng.normal());
  return out;
}

void apply_plan(const InterventionPlan& plan, int layer, std::span<const double> z,
                std::span<double> out, const TokenKey& key) {
  std::copy(z.begin(), z.end(), out.begin());
  bool have_stats = false;
  LogitStats stats;
  for (const Directive& d : plan.directives) {
    if (!d.layers.contains(layer)) continue;
    if (!have_stats) {
      stats = logit_stats(z);
      have_stats = true;
    }
    for (int e : d.experts) {
      const auto k = static_cast<std::size_t>(e);
      if (d.mode == InterventionMode::soft) {
        const double sign = d.direction == Direction::activate ? 1.0 : -1.0;
        out[k] = z[k] + sign * d.lambda * stats.std;
      } else {
        Rng rng(mix_keys({plan.rng_seed, key.sequence_hash, key.token,
                          static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(e)}));
        out[k] = hard_value(stats, d.direction, plan.perturbation_sigma * rng.normal());
      }
    }
  }
}

std::vector<double> apply_plan(const InterventionPlan& plan, int layer, std::span<const double> z,
                               const TokenKey& key) {
  std::vector<double> out(z.size());
  apply_plan(plan, layer, z, out, key);
  return out;
}

InterventionPlan build_plan(const ExpertSet& experts, InterventionMode mode, Direction direction,
                            double lambda, const std::optional<LayerRange>& layers,
                            std::uint64_t rng_seed, double perturbation_sigma) {
  std::map<int, std::vector<int>> layers_by_expert;
  for (const auto& m : experts.members)
    if (!layers || layers->contains(m.layer)) layers_by_expert[m.expert].push_back(m.layer);

  std::map<std::pair<int, int>, std::vector<int>> experts_by_run;
  for (auto& [expert, ls] : layers_by_expert) {
    std::sort(ls.begin(), ls.end());
    ls.erase(std::unique(ls.begin(), ls.end()), ls.end());
    std::size_t start = 0;
    for (std::size_t i = 1; i <= ls.size(); ++i) {
      if (i == ls.size() || ls[i] != ls[i - 1] + 1) {
        experts_by_run[{ls[start], ls[i - 1]}].push_back(expert);
        start = i;
      }
    }
  }

  InterventionPlan plan;
  plan.rng_seed = rng_seed;
  plan.perturbation_sigma = perturbation_sigma;
  for (auto& [run, es] : experts_by_run) {
    Directive d;
    d.layers = {run.first, run.second};
    d.experts = std::move(es);
    d.mode = mode;
    d.direction = direction;
    d.lambda = mode == InterventionMode::soft ? lambda : 0.0;
    plan.directives.push_back(std::move(d));
  }
  if (mode == InterventionMode::soft && (!std::isfinite(lambda) || std::abs(lambda) > kMaxSoftLambda))
    throw ConfigError("soft lambda must be finite with |lambda| <= 4");
  plan.validate();
  return plan;
}

std::string plan_to_json(const InterventionPlan& plan) {
  nlohmann::ordered_json j;
  j["perturbation_sigma"] = plan.perturbation_sigma;
  j["rng_seed"] = plan.rng_seed;
  j["directives"] = nlohmann::ordered_json::array();
  for (const Directive& d : plan.directives) {
    nlohmann::ordered_json dj;
    dj["layers"] = {d.layers.first, d.layers.last};
    dj["experts"] = d.experts;
    dj["mode"] = to_string(d.mode);
    dj["direction"] = to_string(d.direction);
    dj["lambda"] = d.lambda;
    j["directives"].push_back(std::move(dj));
  }
  return j.dump(2) + "\n";
}

InterventionPlan plan_from_json(const std::string& text) {
  InterventionPlan plan;
  try {
    const auto j = nlohmann::json::parse(text);
    plan.perturbation_sigma = j.value("perturbation_sigma", kDefaultPerturbationSigma);
    plan.rng_seed = j.value("rng_seed", std::uint64_t{0});
    std::size_t i = 0;
    for (const auto& dj : j.at("directives")) {
      Directive d;
      const auto& layers = dj.at("layers");
      if (!layers.is_array() || layers.size() != 2)
        throw ConfigError(directive_name(i) + ": layers must be [lo, hi]");
      d.layers = {layers[0].get<int>(), layers[1].get<int>()};
      d.experts = dj.at("experts").get<std::vector<int>>();
      d.mode = parse_intervention_mode(dj.at("mode").get<std::string>());
      d.direction = parse_direction(dj.value("direction", std::string("activate")));
      if (d.mode == InterventionMode::soft && !dj.contains("lambda"))
        throw ConfigError(directive_name(i) + ": soft directive requires lambda");
      d.lambda = dj.value("lambda", 0.0);
      plan.directives.push_back(std::move(d));
      ++i;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid plan JSON: ") + e.what());
  }
  plan.validate();
  return plan;
}

InterventionPlan read_plan_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open plan '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return plan_from_json(buf.str());
}

}  // namespace routelab
