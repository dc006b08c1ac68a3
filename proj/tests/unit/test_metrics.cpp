#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "gen.hpp"
#include "routelab/errors.hpp"
#include "routelab/metrics.hpp"
#include "routelab/planted.hpp"

using namespace routelab;

namespace {

// mpmath at 50 digits, see tests/oracles/hjs_oracle.py
constexpr double kHjsSkewed = 0.56768795503191689167;

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

SequenceTrace sequence_with_sets(const std::vector<std::vector<int>>& sets, int e,
                                 const std::string& id = "s") {
  const int k = static_cast<int>(sets.front().size());
  const ModelSpec spec{"m", 1, e, k, NormMode::softmax_all};
  SequenceTrace seq({id, "eng", "generic", id}, spec, sets.size());
  for (std::size_t t = 0; t < sets.size(); ++t)
    std::copy(sets[t].begin(), sets[t].end(), seq.selected(t, 0).begin());
  return seq;
}

// Exact mean of the pairwise Jaccard values as a reduced fraction, rounded once.
double brute_force_consistency(const SequenceTrace& seq, int layer) {
  std::uint64_t num = 0, den = 1;
  for (std::size_t a = 0; a < seq.length(); ++a)
    for (std::size_t b = a + 1; b < seq.length(); ++b) {
      std::set<int> sa(seq.at(a, layer).selected.begin(), seq.at(a, layer).selected.end());
      std::set<int> sb(seq.at(b, layer).selected.begin(), seq.at(b, layer).selected.end());
      std::set<int> inter, uni;
      std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(inter, inter.end()));
      std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(uni, uni.end()));
      // num/den += |inter| / |uni|
      num = num * uni.size() + inter.size() * den;
      den *= uni.size();
      const auto g = std::gcd(num, den);
      num /= g;
      den /= g;
    }
  const std::uint64_t pairs = seq.length() * (seq.length() - 1) / 2;
  const auto g = std::gcd(num, pairs);
  return static_cast<double>(num / g) / static_cast<double>(den * (pairs / g));
}

}  // namespace

TEST_CASE("expert importance is the token mean") {
  const ModelSpec spec{"m", 1, 4, 2, NormMode::softmax_all};
  SequenceTrace seq({"s", "eng", "generic", "p"}, spec, 2);
  // ln of the target probabilities reproduces them under softmax_all
  const double p0[] = {0.5, 0.5, 1e-30, 1e-30};
  const double p1[] = {0.1, 0.3, 0.6, 1e-30};
  for (int i = 0; i < 4; ++i) {
    seq.logits(0, 0)[i] = static_cast<float>(std::log(p0[i]));
    seq.logits(1, 0)[i] = static_cast<float>(std::log(p1[i]));
  }
  seq.selected(0, 0)[0] = 0, seq.selected(0, 0)[1] = 1;
  seq.selected(1, 0)[0] = 2, seq.selected(1, 0)[1] = 1;
  const auto q = expert_importance(seq, 0, spec);
  CHECK(q.values[0] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(q.values[1] == doctest::Approx(0.4).epsilon(1e-6));
  CHECK(q.values[2] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(q.values[3] == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("expert importance of one token is its routing weights") {
  Rng rng(4);
  const ModelSpec spec{"m", 2, 8, 2, NormMode::softmax_all};
  const auto seq = testing::random_sequence(rng, spec, 1, {"s", "l", "d", "p"});
  CHECK(expert_importance(seq, 1, spec).values == routing_weights(seq.at(0, 1), spec));
}

TEST_CASE("expert importance matches an extended precision recomputation") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    ModelSpec spec = testing::random_spec(rng);
    const auto seq = testing::random_sequence(rng, spec, 10, {"s", "l", "d", "p"});
    const int layer = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_layers)));
    const auto q = expert_importance(seq, layer, spec);
    const auto e = static_cast<std::size_t>(spec.num_experts);

    std::vector<long double> oracle(e, 0.0L);
    for (std::size_t t = 0; t < 10; ++t) {
      const auto r = seq.at(t, layer);
      std::vector<long double> p(e, 0.0L);
      if (spec.norm_mode == NormMode::softmax_all) {
        long double mx = r.logits[0];
        for (float z : r.logits) mx = std::max<long double>(mx, z);
        long double s = 0;
        for (std::size_t i = 0; i < e; ++i) s += p[i] = std::exp(static_cast<long double>(r.logits[i]) - mx);
        for (auto& x : p) x /= s;
      } else {
        long double mx = r.logits[static_cast<std::size_t>(r.selected[0])];
        for (int i : r.selected) mx = std::max<long double>(mx, r.logits[static_cast<std::size_t>(i)]);
        long double s = 0;
        for (int i : r.selected)
          s += p[static_cast<std::size_t>(i)] = std::exp(static_cast<long double>(r.logits[static_cast<std::size_t>(i)]) - mx);
        for (auto& x : p) x /= s;
      }
      for (std::size_t i = 0; i < e; ++i) oracle[i] += p[i];
    }
    for (std::size_t i = 0; i < e; ++i) CHECK(std::abs(q.values[i] - static_cast<double>(oracle[i] / 10)) <= 1e-12);
    CHECK(std::abs(sum(q.values) - 1.0) <= 1e-9);
  }
}

TEST_CASE("expert importance rejects compact traces under softmax_all") {
  Rng rng(1);
  const ModelSpec topk{"m", 1, 4, 2, NormMode::softmax_topk};
  const auto seq = testing::random_sequence(rng, topk, 3, {"s", "l", "d", "p"}, true);
  CHECK_NOTHROW(expert_importance(seq, 0, topk));
  const ModelSpec all{"m", 1, 4, 2, NormMode::softmax_all};
  CHECK_THROWS_AS(expert_importance(seq, 0, all), CapabilityError);
}

TEST_CASE("entropy") {
  const std::vector<double> uniform(8, 0.125);
  CHECK(entropy(uniform) == doctest::Approx(std::log(8.0)).epsilon(1e-15));
  const std::vector<double> point{0, 1, 0};
  CHECK(entropy(point) == 0.0);
}

TEST_CASE("hjs analytic cases") {
  const std::vector<double> a{0.7, 0.1, 0.1, 0.1};
  const std::vector<double> b{0.1, 0.7, 0.1, 0.1};
  CHECK(hjs_divergence(a, a) == 0.0);
  CHECK(std::abs(hjs_divergence(a, b) - kHjsSkewed) <= 1e-12);

  const std::vector<double> p0{1, 0, 0, 0};
  const std::vector<double> p1{0, 1, 0, 0};
  CHECK(std::abs(hjs_divergence(p0, p1) - 0.5) <= 1e-12);
  CHECK(hjs_divergence(p0, p0) == 0.0);
}

TEST_CASE("hjs degenerate denominator") {
  // E = 2 disjoint point masses: JS = ln 2 = F, so the ratio is exactly 1.
  const std::vector<double> p0{1, 0};
  const std::vector<double> p1{0, 1};
  CHECK(hjs_divergence(p0, p1) == doctest::Approx(1.0).epsilon(1e-12));
  // E = 1: F = 0 and JS = 0.
  const std::vector<double> one{1.0};
  CHECK(hjs_divergence(one, one) == 0.0);
}

TEST_CASE("hjs rejects non-normalized input") {
  const std::vector<double> ok{0.5, 0.5};
  CHECK_THROWS_AS(hjs_divergence(std::vector<double>{0.5, 0.6}, ok), DomainError);
  CHECK_THROWS_AS(hjs_divergence(std::vector<double>{1.5, -0.5}, ok), DomainError);
  CHECK_THROWS_AS(hjs_divergence(std::vector<double>{1.0}, ok), DomainError);
  CHECK_NOTHROW(hjs_divergence(std::vector<double>{0.5 + 5e-7, 0.5}, ok));
}

TEST_CASE("hjs symmetry, identity and bounds over random pairs") {
  Rng rng(12345);
  for (int e : {2, 16, 128}) {
    double worst_asym = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const bool sparse = i % 3 == 0;
      const auto a = testing::random_distribution(rng, e, sparse);
      const auto b = testing::random_distribution(rng, e, sparse);
      const double ab = hjs_divergence(a, b);
      const double ba = hjs_divergence(b, a);
      worst_asym = std::max(worst_asym, std::abs(ab - ba));
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0);
      if (i % 10 == 0) CHECK(hjs_divergence(a, a) == 0.0);
    }
    CHECK(worst_asym <= 1e-12);
  }
}

TEST_CASE("divergence profile pairing") {
  Rng rng(6);
  const ModelSpec spec{"m", 3, 8, 2, NormMode::softmax_all};
  const TraceSet set = testing::random_trace_set(rng, spec, 30);
  const TraceSlice eng = select(set, {"eng_Latn", ""});
  const TraceSlice fra = select(set, {"fra_Latn", ""});

  const auto self = divergence_profile(eng, eng, spec);
  CHECK(self.mean_hjs == std::vector<double>(3, 0.0));
  CHECK(self.n_pairs == eng.size());

  const auto prof = divergence_profile(eng, fra, spec);
  CHECK(prof.language_tag == "fra_Latn");
  CHECK(prof.n_pairs == 10);
  CHECK(prof.n_unpaired == 0);
  for (int l = 0; l < 3; ++l) {
    double expect = 0.0;
    for (const auto* a : eng)
      for (const auto* b : fra)
        if (a->pair_key() == b->pair_key() && a->domain_tag() == b->domain_tag())
          expect += hjs_divergence(expert_importance(*a, l, spec).values,
                                   expert_importance(*b, l, spec).values);
    CHECK(prof.mean_hjs[static_cast<std::size_t>(l)] == doctest::Approx(expect / 10).epsilon(1e-12));
  }

  const TraceSlice one_eng{eng.front()};
  const TraceSlice partial = select(set, {"fra_Latn", ""});
  const auto single = divergence_profile(one_eng, partial, spec);
  CHECK(single.n_pairs == 1);
  CHECK(single.n_unpaired == partial.size() - 1);
  for (int l = 0; l < 3; ++l) {
    const TraceSlice match{*std::find_if(partial.begin(), partial.end(), [&](auto* s) {
      return s->pair_key() == one_eng[0]->pair_key() && s->domain_tag() == one_eng[0]->domain_tag();
    })};
    CHECK(single.mean_hjs[static_cast<std::size_t>(l)] ==
          hjs_divergence(expert_importance(*one_eng[0], l, spec).values,
                         expert_importance(*match[0], l, spec).values));
  }
}

TEST_CASE("divergence profile with nothing paired") {
  Rng rng(7);
  const ModelSpec spec{"m", 1, 4, 2, NormMode::softmax_all};
  const auto a = testing::random_sequence(rng, spec, 3, {"a", "eng", "generic", "p0"});
  const auto b = testing::random_sequence(rng, spec, 3, {"b", "fra", "generic", "p1"});
  CHECK_THROWS_AS(divergence_profile({&a}, {&b}, spec), EmptyProfileError);
}

TEST_CASE("profiles ignore sequence order") {
  Rng rng(31);
  const ModelSpec spec{"m", 3, 8, 2, NormMode::softmax_all};
  const TraceSet set = testing::random_trace_set(rng, spec, 60, 20);
  TraceSlice eng = select(set, {"eng_Latn", ""});
  TraceSlice zho = select(set, {"zho_Hans", ""});
  const auto d1 = divergence_profile(eng, zho, spec);
  const auto e1 = entropy_profile(zho, spec);
  const auto c1 = consistency_profile(zho, spec, 20, 5);
  const auto q1 = corpus_importance(zho, 1, spec);
  std::reverse(eng.begin(), eng.end());
  std::reverse(zho.begin(), zho.end());
  std::swap(zho[1], zho[4]);
  CHECK(divergence_profile(eng, zho, spec).mean_hjs == d1.mean_hjs);
  CHECK(entropy_profile(zho, spec).mean_entropy == e1.mean_entropy);
  CHECK(consistency_profile(zho, spec, 20, 5).mean_jaccard == c1.mean_jaccard);
  CHECK(corpus_importance(zho, 1, spec) == q1);
}

TEST_CASE("corpus divergence") {
  Rng rng(8);
  const ModelSpec spec{"m", 2, 8, 2, NormMode::softmax_all};
  const TraceSet set = testing::random_trace_set(rng, spec, 12);
  const TraceSlice a = select(set, {"eng_Latn", ""});
  CHECK(corpus_divergence(a, a, 0, spec) == 0.0);
  const TraceSlice x{&set.sequences[0]};
  const TraceSlice y{&set.sequences[1]};
  CHECK(corpus_divergence(x, y, 1, spec) ==
        hjs_divergence(expert_importance(set.sequences[0], 1, spec).values,
                       expert_importance(set.sequences[1], 1, spec).values));
  CHECK_THROWS_AS(corpus_divergence(a, {}, 0, spec), EmptyProfileError);
}

TEST_CASE("corpus divergence of disjoint planted domains") {
  PlantedSpec p = default_planted_spec();
  p.languages.resize(1);
  p.num_pairs = 16;
  // Each pool covers half the experts, so the ideal value is ln 2 / (ln 16 - ln 8) = 1.
  p.domains = {{"math", {0, 1, 2, 3, 4, 5, 6, 7}, 8.0, {}}, {"code", {8, 9, 10, 11, 12, 13, 14, 15}, 8.0, {}}};
  p.base_logit = 0.0;
  p.concentration_slope = 0.0;
  p.shared_noise = 0.3;
  const TraceSet set = generate(p);
  const TraceSlice math = select(set, {"", "math"});
  const TraceSlice code = select(set, {"", "code"});
  for (int l = 0; l < p.spec.num_layers; ++l) CHECK(corpus_divergence(math, code, l, p.spec) >= 0.9);
}

TEST_CASE("entropy profile") {
  const ModelSpec spec{"m", 2, 8, 2, NormMode::softmax_all};
  SequenceTrace seq({"s", "eng", "generic", "p"}, spec, 3);
  for (std::size_t t = 0; t < 3; ++t)
    for (int l = 0; l < 2; ++l) {
      seq.selected(t, l)[0] = 0;
      seq.selected(t, l)[1] = 1;
    }
  const auto prof = entropy_profile({&seq}, spec);
  CHECK(prof.n_tokens == 3);
  CHECK(prof.mean_entropy[0] == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  const ModelSpec topk1{"m", 1, 4, 1, NormMode::softmax_topk};
  SequenceTrace point({"s", "eng", "generic", "p"}, topk1, 2);
  CHECK(entropy_profile({&point}, topk1).mean_entropy[0] == 0.0);

  Rng rng(2);
  const auto compact = testing::random_sequence(rng, {"m", 1, 4, 2, NormMode::softmax_topk}, 2,
                                                {"c", "l", "d", "p"}, true);
  CHECK_THROWS_AS(entropy_profile({&compact}, {"m", 1, 4, 2, NormMode::softmax_topk}), CapabilityError);
}

TEST_CASE("entropy profile stays within [0, ln E]") {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const ModelSpec spec = testing::random_spec(rng);
    const TraceSet set = testing::random_trace_set(rng, spec, 6);
    const auto prof = entropy_profile(all_sequences(set), spec);
    for (double h : prof.mean_entropy) {
      CHECK(h >= 0.0);
      CHECK(h <= std::log(static_cast<double>(spec.num_experts)) + 1e-12);
    }
  }
}

TEST_CASE("planted late-layer concentration lowers entropy") {
  PlantedSpec p = default_planted_spec();
  p.num_pairs = 8;
  const TraceSet set = generate(p);
  const auto prof = entropy_profile(select(set, {"eng_Latn", "generic"}), p.spec);
  CHECK(prof.mean_entropy.back() < prof.mean_entropy.front());
}

TEST_CASE("jaccard") {
  const std::int32_t a[] = {1, 2, 3, 4};
  const std::int32_t b[] = {3, 4, 5, 6};
  CHECK(jaccard(a, b) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(jaccard(a, a) == 1.0);
  const std::int32_t c[] = {7, 8, 9, 10};
  CHECK(jaccard(a, c) == 0.0);

  const auto seq = sequence_with_sets({{1, 2, 3, 4}, {3, 4, 5, 6}}, 8);
  const auto prof = consistency_profile({&seq}, {"m", 1, 8, 4, NormMode::softmax_all});
  CHECK(prof.mean_jaccard[0] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("identical selections are fully consistent") {
  const auto seq = sequence_with_sets(std::vector<std::vector<int>>(50, {2, 5}), 8);
  const auto prof = consistency_profile({&seq}, {"m", 1, 8, 2, NormMode::softmax_all}, 500, 3);
  CHECK(prof.mean_jaccard[0] == 1.0);
  CHECK(prof.pairs_sampled == 500);
}

TEST_CASE("consistency pairs") {
  CHECK(consistency_pairs(1, 500, 0).empty());
  const auto all = consistency_pairs(30, 500, 0);
  CHECK(all.size() == 435);
  const auto sample = consistency_pairs(60, 500, 42);
  CHECK(sample.size() == 500);
  std::set<std::pair<std::size_t, std::size_t>> distinct(sample.begin(), sample.end());
  CHECK(distinct.size() == 500);
  for (auto [a, b] : sample) {
    CHECK(a < b);
    CHECK(b < 60);
  }
  CHECK(consistency_pairs(60, 500, 42) == sample);
  CHECK(consistency_pairs(60, 500, 43) != sample);
}

TEST_CASE("exact enumeration equals brute force") {
  Rng rng(50);
  for (std::size_t len = 2; len <= 31; ++len) {
    const ModelSpec spec{"m", 2, 12, 3, NormMode::softmax_all};
    const auto seq = testing::random_sequence(rng, spec, len, {"s", "l", "d", "p"});
    const auto prof = consistency_profile({&seq}, spec, 500, 9);
    for (int l = 0; l < 2; ++l)
      CHECK(prof.mean_jaccard[static_cast<std::size_t>(l)] == brute_force_consistency(seq, l));
  }
}

TEST_CASE("sampled consistency tracks the exact value") {
  const ModelSpec spec{"m", 1, 16, 2, NormMode::softmax_all};
  Rng rng(60);
  const auto seq = testing::random_sequence(rng, spec, 60, {"s", "l", "d", "p"});
  const double exact = brute_force_consistency(seq, 0);
  int within = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double sampled = consistency_profile({&seq}, spec, 500, seed).mean_jaccard[0];
    if (std::abs(sampled - exact) <= 0.05) ++within;
  }
  CHECK(within >= 99);
}

TEST_CASE("short sequences are skipped and counted") {
  const ModelSpec spec{"m", 1, 4, 2, NormMode::softmax_all};
  const auto one = sequence_with_sets({{0, 1}}, 4, "one");
  const auto two = sequence_with_sets({{0, 1}, {0, 2}}, 4, "two");
  const auto prof = consistency_profile({&one, &two}, spec);
  CHECK(prof.n_sequences == 1);
  CHECK(prof.n_skipped == 1);
  CHECK(prof.mean_jaccard[0] == doctest::Approx(1.0 / 3));
}

TEST_CASE("pearson correlation") {
  CHECK(correlate(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(correlate(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(correlate(std::vector<double>{1, 2, 3}, std::vector<double>{5, 5, 5}), UndefinedCorrelationError);
  CHECK_THROWS_AS(correlate(std::vector<double>{1, 2}, std::vector<double>{1, 2}), DomainError);
  CHECK_THROWS_AS(correlate(std::vector<double>{1, 2, NAN}, std::vector<double>{1, 2, 3}), DomainError);
  const double r = correlate(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4});
  CHECK(r == doctest::Approx(0.8));
}

TEST_CASE("csv schemas") {
  DivergenceProfile d{"fra_Latn", {0.25, 0.5}, 3, 0};
  CHECK(divergence_csv({d}) == "language,layer,mean_hjs,n_pairs\nfra_Latn,0,0.25,3\nfra_Latn,1,0.5,3\n");
  EntropyProfile e{"a,b", {1.5}, 7};
  CHECK(entropy_csv({e}) == "language,layer,mean_entropy_nats,n_tokens\n\"a,b\",0,1.5,7\n");
  ConsistencyProfile c{"eng", {0.75}, 2, 0, 10};
  CHECK(consistency_csv({c}) == "language,layer,mean_jaccard,n_sequences\neng,0,0.75,2\n");
}
