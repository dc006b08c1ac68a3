#include "routelab/experts.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <json.hpp>

#include "reduce.hpp"
#include "routelab/errors.hpp"
#include "routelab/trace_io.hpp"

namespace routelab {

ActivationFrequency activation_frequency(const TraceSlice& slice, const ModelSpec& spec) {
  if (slice.empty()) throw DomainError("activation_frequency: empty slice");
  const auto width = static_cast<std::size_t>(spec.num_layers * spec.num_experts);
  std::vector<std::vector<double>> rows;
  rows.reserve(slice.size());
  std::vector<std::size_t> counts(width);
  for (const SequenceTrace* seq : slice) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t t = 0; t < seq->length(); ++t)
      for (int l = 0; l < spec.num_layers; ++l)
        for (std::int32_t e : seq->at(t, l).selected)
          ++counts[static_cast<std::size_t>(l * spec.num_experts + e)];
    std::vector<double> row(width);
    const auto len = static_cast<double>(seq->length());
    for (std::size_t i = 0; i < width; ++i) row[i] = static_cast<double>(counts[i]) / len;
    rows.push_back(std::move(row));
  }

  ActivationFrequency f;
  f.num_layers = spec.num_layers;
  f.num_experts = spec.num_experts;
  f.top_k = spec.top_k;
  f.num_sequences = slice.size();
  f.values = detail::sorted_column_sums(rows, width);
  for (double& v : f.values) v /= static_cast<double>(slice.size());
  return f;
}

DeltaProfile delta(const ActivationFrequency& target, const ActivationFrequency& baseline,
                   std::string target_label, std::string baseline_label) {
  if (target.num_layers != baseline.num_layers || target.num_experts != baseline.num_experts ||
      target.values.size() != baseline.values.size())
    throw ConfigError("delta: activation frequency shapes differ");
  DeltaProfile dp;
  dp.num_layers = target.num_layers;
  dp.num_experts = target.num_experts;
  dp.target_label = std::move(target_label);
  dp.baseline_label = std::move(baseline_label);
  dp.values.resize(target.values.size());
  for (std::size_t i = 0; i < dp.values.size(); ++i)
    dp.values[i] = target.values[i] - baseline.values[i];
  return dp;
}

ExpertSet select_experts(const DeltaProfile& dp, double tau, const std::optional<LayerRange>& layers,
                         std::string label) {
  if (!(tau > 0.0)) throw DomainError("tau must be > 0");
  ExpertSet set;
  set.label = label.empty() ? dp.target_label : std::move(label);
  set.tau = tau;
  for (int l = 0; l < dp.num_layers; ++l) {
    if (layers && !layers->contains(l)) continue;
    for (int e = 0; e < dp.num_experts; ++e)
      if (dp.at(l, e) > tau) set.members.push_back({l, e, dp.at(l, e)});
  }
  return set;
}

ExpertSet multilingual_union(const std::vector<DeltaProfile>& per_language, double tau,
                             const std::optional<LayerRange>& layers, std::string label) {
  if (!(tau > 0.0)) throw DomainError("tau must be > 0");
  for (const auto& dp : per_language)
    if (dp.num_layers != per_language.front().num_layers ||
        dp.num_experts != per_language.front().num_experts)
      throw ConfigError("multilingual_union: delta profile shapes differ");

  std::map<ExpertKey, double> best;
  for (const auto& dp : per_language)
    for (const auto& m : select_experts(dp, tau, layers).members) {
      auto [it, inserted] = best.emplace(ExpertKey{m.layer, m.expert}, m.delta);
      if (!inserted) it->second = std::max(it->second, m.delta);
    }

  ExpertSet set;
  set.label = std::move(label);
  set.tau = tau;
  for (const auto& [key, d] : best) set.members.push_back({key.layer, key.expert, d});
  return set;
}

std::vector<ExpertKey> overlap(const ExpertSet& a, const ExpertSet& b) {
  std::set<ExpertKey> in_b;
  for (const auto& m : b.members) in_b.insert({m.layer, m.expert});
  std::set<ExpertKey> shared;
  for (const auto& m : a.members)
    if (in_b.count({m.layer, m.expert})) shared.insert({m.layer, m.expert});
  return {shared.begin(), shared.end()};
}

std::string expert_set_to_json(const ExpertSet& set) {
  nlohmann::ordered_json j;
  j["label"] = set.label;
  j["tau"] = set.tau;
  j["members"] = nlohmann::ordered_json::array();
  for (const auto& m : set.members)
    j["members"].push_back({{"layer", m.layer}, {"expert", m.expert}, {"delta", m.delta}});
  return j.dump(2) + "\n";
}

ExpertSet expert_set_from_json(const std::string& text) {
  ExpertSet set;
  try {
    const auto j = nlohmann::json::parse(text);
    set.label = j.value("label", std::string());
    set.tau = j.at("tau").get<double>();
    for (const auto& mj : j.at("members"))
      set.members.push_back(
          {mj.at("layer").get<int>(), mj.at("expert").get<int>(), mj.at("delta").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid expert set JSON: ") + e.what());
  }
  std::set<ExpertKey> seen;
  for (const auto& m : set.members) {
    if (m.layer < 0 || m.expert < 0) throw ValidationError("expert set: negative index");
    if (!(m.delta > set.tau))
      throw ValidationError("expert set: member (" + std::to_string(m.layer) + "," +
                            std::to_string(m.expert) + ") has delta <= tau");
    if (!seen.insert({m.layer, m.expert}).second)
      throw ValidationError("expert set: duplicate member (" + std::to_string(m.layer) + "," +
                            std::to_string(m.expert) + ")");
  }
  std::sort(set.members.begin(), set.members.end(), [](const auto& x, const auto& y) {
    return std::tie(x.layer, x.expert) < std::tie(y.layer, y.expert);
  });
  return set;
}

std::string delta_to_csv(const DeltaProfile& dp) {
  std::string out = "layer,expert,delta\n";
  for (int l = 0; l < dp.num_layers; ++l)
    for (int e = 0; e < dp.num_experts; ++e)
      out += std::to_string(l) + "," + std::to_string(e) + "," + format_double(dp.at(l, e)) + "\n";
  return out;
}

}  // namespace routelab
