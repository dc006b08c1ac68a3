#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>

#include "routelab/errors.hpp"
#include "routelab/intervention.hpp"
#include "routelab/sim.hpp"

using namespace routelab;

namespace {

// mpmath at 50 digits, see tests/oracles/hjs_oracle.py
constexpr double kSoftEdit = 1.5590169943749474241;

Directive directive(LayerRange layers, std::vector<int> experts, InterventionMode mode,
                    Direction direction = Direction::activate, double lambda = 0.5) {
  return Directive{layers, std::move(experts), mode, direction, lambda};
}

std::vector<double> random_logits(Rng& rng, int e) {
  std::vector<double> z(static_cast<std::size_t>(e));
  for (auto& x : z) x = rng.normal() * rng.uniform(0.1, 5.0);
  return z;
}

}  // namespace

TEST_CASE("parsing modes and directions") {
  CHECK(parse_intervention_mode("hard") == InterventionMode::hard);
  CHECK(parse_direction("deactivate") == Direction::deactivate);
  CHECK(to_string(Direction::activate) == "activate");
  CHECK_THROWS_AS(parse_intervention_mode("medium"), ConfigError);
}

TEST_CASE("logit stats use the population std") {
  const std::vector<double> z{1, 2, 3, 4};
  const auto s = logit_stats(z);
  CHECK(s.std == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
  CHECK(s.max == 4);
  CHECK(s.min == 1);
}

TEST_CASE("soft edit") {
  const std::vector<double> z{1, 2, 3, 4};
  const auto out = apply_soft(z, 0, 0.5);
  CHECK(std::abs(out[0] - kSoftEdit) <= 1e-6);
  CHECK(std::abs(out[0] - kSoftEdit) <= 1e-15);
  CHECK(out[1] == 2);
  CHECK(apply_soft(z, 2, 0.0) == z);
  const std::vector<double> flat(5, 0.7);
  CHECK(apply_soft(flat, 1, 3.0) == flat);
}

TEST_CASE("soft edit touches exactly one coordinate") {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto z = random_logits(rng, 2 + static_cast<int>(rng.below(60)));
    const int k = static_cast<int>(rng.below(z.size()));
    const double lambda = rng.uniform(-4, 4);
    const auto out = apply_soft(z, k, lambda);
    for (std::size_t i = 0; i < z.size(); ++i)
      if (static_cast<int>(i) != k) CHECK(std::bit_cast<std::uint64_t>(out[i]) == std::bit_cast<std::uint64_t>(z[i]));
  }
}

TEST_CASE("hard activation lands at the maximum") {
  const std::vector<double> z{0.3, -1.2, 0.8};
  int close = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    Rng rng(seed);
    const auto out = apply_hard(z, 1, Direction::activate, rng);
    if (std::abs(out[1] - 0.8) < 0.01) ++close;
    CHECK(out[1] >= 0.8);
    CHECK(out[0] == 0.3);
  }
  CHECK(close >= 9999);
  Rng rng(3);
  const auto down = apply_hard(z, 0, Direction::deactivate, rng);
  CHECK(down[0] <= -1.2);
  CHECK(down[0] > -1.2 - 0.01);
}

TEST_CASE("hard activation of K experts always makes the top K") {
  Rng rng(2024);
  for (int trial = 0; trial < 10000; ++trial) {
    const int e = 4 + static_cast<int>(rng.below(60));
    const int k = 1 + static_cast<int>(rng.below(std::min<std::uint64_t>(8, static_cast<std::uint64_t>(e - 1))));
    const auto z = random_logits(rng, e);
    std::vector<int> targets;
    while (static_cast<int>(targets.size()) < k) {
      const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(e)));
      if (std::find(targets.begin(), targets.end(), t) == targets.end()) targets.push_back(t);
    }
    InterventionPlan plan;
    plan.rng_seed = static_cast<std::uint64_t>(trial);
    plan.directives.push_back(directive({0, 0}, targets, InterventionMode::hard));
    const auto out = apply_plan(plan, 0, z, TokenKey{7, static_cast<std::uint64_t>(trial)});
    auto chosen = top_k_indices(out, k);
    std::sort(chosen.begin(), chosen.end());
    std::sort(targets.begin(), targets.end());
    CHECK(chosen == targets);
  }
}

TEST_CASE("plan application") {
  const std::vector<double> z{0.5, 2.0, -1.0, 1.5};
  InterventionPlan plan;
  plan.rng_seed = 9;
  plan.directives.push_back(directive({2, 4}, {0}, InterventionMode::soft, Direction::activate, 1.0));
  plan.directives.push_back(directive({3, 3}, {2}, InterventionMode::hard));
  const TokenKey key{11, 4};

  CHECK(apply_plan(plan, 0, z, key) == z);
  const auto l2 = apply_plan(plan, 2, z, key);
  CHECK(l2[0] == 0.5 + logit_stats(z).std);
  CHECK(l2[2] == -1.0);

  // Both edits on layer 3, the hard one measured against the original max 2.0
  // even though the soft edit may exceed it.
  plan.directives[0].lambda = 4.0;
  const auto l3 = apply_plan(plan, 3, z, key);
  CHECK(l3[0] == 0.5 + 4.0 * logit_stats(z).std);
  CHECK(l3[2] >= 2.0);
  CHECK(l3[2] < 2.0 + 0.01);
  CHECK(l3[1] == 2.0);
  CHECK(l3[3] == 1.5);

  CHECK(apply_plan(plan, 3, z, key) == l3);
  CHECK(apply_plan(plan, 3, z, TokenKey{11, 5}) != l3);

  std::swap(plan.directives[0], plan.directives[1]);
  CHECK(apply_plan(plan, 3, z, key) == l3);
}

TEST_CASE("identity plans") {
  Rng rng(5);
  const auto z = random_logits(rng, 16);
  InterventionPlan plan;
  plan.directives.push_back(directive({0, 5}, {1, 2, 3}, InterventionMode::soft, Direction::activate, 0.0));
  plan.directives.push_back(directive({0, 5}, {}, InterventionMode::hard));
  CHECK(apply_plan(plan, 2, z, {}) == z);
}

TEST_CASE("plan validation") {
  InterventionPlan plan;
  plan.directives.push_back(directive({0, 3}, {1}, InterventionMode::soft));
  CHECK_NOTHROW(plan.validate_for(4, 8, 2));
  CHECK_THROWS_AS(plan.validate_for(3, 8, 2), ConfigError);

  auto bad = plan;
  bad.directives.push_back(directive({3, 5}, {1}, InterventionMode::hard));
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("directive #1"), ConfigError);

  bad = plan;
  bad.directives[0].experts = {8};
  CHECK_THROWS_WITH_AS(bad.validate_for(4, 8, 2), doctest::Contains("directive #0"), ConfigError);

  bad = plan;
  bad.directives[0].lambda = 4.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.directives[0].lambda = NAN;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = plan;
  bad.perturbation_sigma = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  InterventionPlan suppress;
  suppress.directives.push_back(directive({0, 0}, {0, 1, 2, 3, 4}, InterventionMode::hard, Direction::deactivate));
  CHECK_NOTHROW(suppress.validate_for(1, 8, 2));
  suppress.directives[0].experts.push_back(5);
  CHECK_THROWS_AS(suppress.validate_for(1, 8, 2), ConfigError);
}

TEST_CASE("build plan coalesces layer runs") {
  CHECK(build_plan(ExpertSet{}, InterventionMode::soft, Direction::activate, 0.5).empty());

  ExpertSet set{"s", 0.3, {{3, 5, 0.5}, {4, 5, 0.5}}};
  const auto plan = build_plan(set, InterventionMode::soft, Direction::activate, 0.5);
  REQUIRE(plan.directives.size() == 1);
  CHECK(plan.directives[0].layers == LayerRange{3, 4});
  CHECK(plan.directives[0].experts == std::vector<int>{5});
  CHECK(plan.directives[0].lambda == 0.5);

  ExpertSet runs{"s", 0.3, {{1, 0, 1}, {2, 0, 1}, {2, 1, 1}, {3, 1, 1}, {5, 0, 1}, {1, 2, 1}, {2, 2, 1}}};
  const auto p = build_plan(runs, InterventionMode::hard, Direction::activate, 0.5);
  // expert 0: 1..2, 5..5; expert 1: 2..3; expert 2: 1..2
  REQUIRE(p.directives.size() == 3);
  CHECK(p.directives[0].layers == LayerRange{1, 2});
  CHECK(p.directives[0].experts == std::vector<int>{0, 2});
  CHECK(p.directives[0].lambda == 0.0);

  const auto band = build_plan(runs, InterventionMode::soft, Direction::activate, 0.5, LayerRange{2, 4});
  REQUIRE(band.directives.size() == 2);
  CHECK(band.directives[0].layers == LayerRange{2, 2});
  CHECK(band.directives[0].experts == std::vector<int>{0, 2});
  CHECK(band.directives[1].layers == LayerRange{2, 3});

  CHECK_THROWS_AS(build_plan(set, InterventionMode::soft, Direction::activate, 5.0), ConfigError);
  CHECK_NOTHROW(build_plan(set, InterventionMode::hard, Direction::activate, 5.0));
}

TEST_CASE("plan json round trip") {
  InterventionPlan plan;
  plan.rng_seed = 123;
  plan.perturbation_sigma = 2e-3;
  plan.directives.push_back(directive({8, 35}, {3, 9}, InterventionMode::soft, Direction::activate, 0.5));
  plan.directives.push_back(directive({4, 19}, {1}, InterventionMode::hard, Direction::deactivate, 0.0));
  const std::string text = plan_to_json(plan);
  const auto back = plan_from_json(text);
  CHECK(back.rng_seed == 123);
  CHECK(back.perturbation_sigma == 2e-3);
  REQUIRE(back.directives.size() == 2);
  CHECK(back.directives[0].layers == LayerRange{8, 35});
  CHECK(back.directives[0].experts == std::vector<int>{3, 9});
  CHECK(back.directives[1].mode == InterventionMode::hard);
  CHECK(back.directives[1].direction == Direction::deactivate);
  CHECK(plan_to_json(back) == text);

  CHECK_THROWS_AS(plan_from_json(R"({"directives":[{"layers":[0,1],"experts":[0],"mode":"soft","direction":"activate"}]})"),
                  ConfigError);
  CHECK_THROWS_AS(plan_from_json(R"({"directives":[{"layers":[0],"experts":[0],"mode":"hard","direction":"activate"}]})"),
                  ConfigError);
  const auto defaults = plan_from_json(R"({"directives":[]})");
  CHECK(defaults.perturbation_sigma == kDefaultPerturbationSigma);
}
