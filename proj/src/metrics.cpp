#include "routelab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "reduce.hpp"
#include "routelab/errors.hpp"
#include "routelab/rng.hpp"
#include "routelab/trace_io.hpp"

namespace routelab {

namespace {

std::string slice_language(const TraceSlice& slice) {
  if (slice.empty()) return "";
  const std::string& first = slice.front()->language_tag();
  for (const SequenceTrace* s : slice)
    if (s->language_tag() != first) return "*";
  return first;
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void check_layer(int layer, const ModelSpec& spec) {
  if (layer < 0 || layer >= spec.num_layers)
    throw DomainError("layer " + std::to_string(layer) + " out of range");
}

void check_distribution(std::span<const double> q, const char* name) {
  double total = 0.0;
  for (double v : q) {
    if (!std::isfinite(v) || v < 0.0)
      throw DomainError(std::string(name) + " has a negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > kNormalizationTolerance)
    throw DomainError(std::string(name) + " sums to " + format_double(total) + ", not 1");
}

double kl_to_mixture(std::span<const double> p, std::span<const double> m) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / m[i]);
  return kl;
}

// Mean Jaccard over pairs of K-sets given how many pairs share s experts
// (Jaccard s / (2K - s)). The sum is formed as an exact fraction and rounded
// once, so the result does not depend on pair order.
double mean_jaccard_of_overlaps(const std::vector<std::uint64_t>& count, int k) {
  using u128 = unsigned __int128;
  constexpr u128 kExactLimit = u128{1} << 53;
  std::uint64_t n = 0;
  for (auto c : count) n += c;
  std::uint64_t d = 1;
  bool exact = true;
  for (int u = k; u <= 2 * k && exact; ++u) {
    const u128 next = static_cast<u128>(d / std::gcd(d, static_cast<std::uint64_t>(u))) * static_cast<u128>(u);
    exact = next < (u128{1} << 62);
    if (exact) d = static_cast<std::uint64_t>(next);
  }
  if (exact) {
    u128 num = 0;
    for (std::size_t s = 1; s < count.size(); ++s)
      num += static_cast<u128>(count[s]) * s * (d / static_cast<std::uint64_t>(2 * k - static_cast<int>(s)));
    u128 den = static_cast<u128>(d) * n;
    u128 a = num, b = den;
    while (b) {
      const u128 t = a % b;
      a = b;
      b = t;
    }
    if (a > 1) {
      num /= a;
      den /= a;
    }
    if (num < kExactLimit && den < kExactLimit)
      return static_cast<double>(static_cast<std::uint64_t>(num)) /
             static_cast<double>(static_cast<std::uint64_t>(den));
  }
  std::vector<double> terms;
  for (std::size_t s = 1; s < count.size(); ++s)
    terms.push_back(static_cast<double>(count[s]) * static_cast<double>(s) /
                    static_cast<double>(2 * k - static_cast<int>(s)));
  return detail::sorted_sum(terms) / static_cast<double>(n);
}

}  // namespace

ExpertImportance expert_importance(const SequenceTrace& seq, int layer, const ModelSpec& spec) {
  check_layer(layer, spec);
  if (seq.length() == 0) throw DomainError("expert_importance: empty sequence");
  const auto e = static_cast<std::size_t>(spec.num_experts);
  ExpertImportance imp{layer, std::vector<double>(e, 0.0)};
  std::vector<double> p(e);
  for (std::size_t t = 0; t < seq.length(); ++t) {
    routing_weights(seq.at(t, layer), spec, p);
    for (std::size_t i = 0; i < e; ++i) imp.values[i] += p[i];
  }
  for (double& v : imp.values) v /= static_cast<double>(seq.length());
  return imp;
}

std::vector<double> corpus_importance(const TraceSlice& slice, int layer, const ModelSpec& spec) {
  if (slice.empty()) throw DomainError("corpus_importance: empty slice");
  std::vector<std::vector<double>> rows;
  rows.reserve(slice.size());
  for (const SequenceTrace* seq : slice) rows.push_back(expert_importance(*seq, layer, spec).values);
  auto mean = detail::sorted_column_sums(rows, static_cast<std::size_t>(spec.num_experts));
  for (double& v : mean) v /= static_cast<double>(slice.size());
  return mean;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double hjs_divergence(std::span<const double> q1, std::span<const double> q2) {
  if (q1.size() != q2.size() || q1.empty())
    throw DomainError("hjs_divergence: inputs must be non-empty and equal length");
  check_distribution(q1, "q1");
  check_distribution(q2, "q2");

  std::vector<double> m(q1.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (q1[i] + q2[i]);
  const double js = 0.5 * (kl_to_mixture(q1, m) + kl_to_mixture(q2, m));
  if (js < kHjsZeroClamp) return 0.0;

  const double f = std::log(static_cast<double>(q1.size())) - 0.5 * (entropy(q1) + entropy(q2));
  return std::min(js / std::max(f, kHjsDenominatorFloor), 1.0);
}

DivergenceProfile divergence_profile(const TraceSlice& ref, const TraceSlice& cmp,
                                     const ModelSpec& spec) {
  using Key = std::pair<std::string, std::string>;
  std::map<Key, const SequenceTrace*> by_key;
  std::size_t unpaired = 0;
  for (const SequenceTrace* s : ref) {
    if (s->pair_key().empty()) {
      ++unpaired;
      continue;
    }
    if (!by_key.emplace(Key{s->domain_tag(), s->pair_key()}, s).second)
      throw ValidationError("sequence '" + s->sequence_id() + "': duplicate pair_key '" +
                            s->pair_key() + "' in reference slice");
  }

  std::vector<std::pair<const SequenceTrace*, const SequenceTrace*>> pairs;
  std::set<Key> cmp_keys;
  for (const SequenceTrace* s : cmp) {
    const Key key{s->domain_tag(), s->pair_key()};
    auto it = s->pair_key().empty() ? by_key.end() : by_key.find(key);
    if (it == by_key.end()) {
      ++unpaired;
      continue;
    }
    if (!cmp_keys.insert(key).second)
      throw ValidationError("sequence '" + s->sequence_id() + "': duplicate pair_key '" +
                            s->pair_key() + "' in comparison slice");
    pairs.emplace_back(it->second, s);
  }
  unpaired += by_key.size() - cmp_keys.size();
  if (pairs.empty()) throw EmptyProfileError("divergence_profile: no paired sequences");

  DivergenceProfile prof;
  prof.language_tag = slice_language(cmp);
  prof.n_pairs = pairs.size();
  prof.n_unpaired = unpaired;
  prof.mean_hjs.resize(static_cast<std::size_t>(spec.num_layers));
  std::vector<double> values(pairs.size());
  for (int l = 0; l < spec.num_layers; ++l) {
    for (std::size_t i = 0; i < pairs.size(); ++i)
      values[i] = hjs_divergence(expert_importance(*pairs[i].first, l, spec).values,
                                 expert_importance(*pairs[i].second, l, spec).values);
    prof.mean_hjs[static_cast<std::size_t>(l)] =
        detail::sorted_sum(values) / static_cast<double>(pairs.size());
  }
  return prof;
}

double corpus_divergence(const TraceSlice& a, const TraceSlice& b, int layer, const ModelSpec& spec) {
  if (a.empty() || b.empty()) throw EmptyProfileError("corpus_divergence: empty slice");
  return hjs_divergence(corpus_importance(a, layer, spec), corpus_importance(b, layer, spec));
}

EntropyProfile entropy_profile(const TraceSlice& slice, const ModelSpec& spec) {
  if (slice.empty()) throw EmptyProfileError("entropy_profile: empty slice");
  EntropyProfile prof;
  prof.language_tag = slice_language(slice);
  prof.mean_entropy.resize(static_cast<std::size_t>(spec.num_layers));
  const auto e = static_cast<std::size_t>(spec.num_experts);
  std::vector<double> p(e);
  std::vector<double> per_sequence(slice.size());
  for (const SequenceTrace* s : slice) {
    if (s->compact()) throw CapabilityError("entropy_profile: compact trace has no logits");
    prof.n_tokens += s->length();
  }
  for (int l = 0; l < spec.num_layers; ++l) {
    for (std::size_t i = 0; i < slice.size(); ++i) {
      double sum = 0.0;
      for (std::size_t t = 0; t < slice[i]->length(); ++t) {
        routing_weights(slice[i]->at(t, l), spec, p);
        sum += entropy(p);
      }
      per_sequence[i] = sum;
    }
    prof.mean_entropy[static_cast<std::size_t>(l)] =
        detail::sorted_sum(per_sequence) / static_cast<double>(prof.n_tokens);
  }
  return prof;
}

double jaccard(std::span<const std::int32_t> a, std::span<const std::int32_t> b) {
  std::size_t shared = 0;
  for (std::int32_t x : a)
    if (std::find(b.begin(), b.end(), x) != b.end()) ++shared;
  const std::size_t uni = a.size() + b.size() - shared;
  return uni == 0 ? 1.0 : static_cast<double>(shared) / static_cast<double>(uni);
}

std::vector<std::pair<std::size_t, std::size_t>> consistency_pairs(std::size_t length,
                                                                   std::size_t pairs,
                                                                   std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (length < 2) return out;
  const std::uint64_t total = static_cast<std::uint64_t>(length) * (length - 1) / 2;
  if (total <= pairs) {
    out.reserve(total);
    for (std::size_t a = 0; a < length; ++a)
      for (std::size_t b = a + 1; b < length; ++b) out.emplace_back(a, b);
    return out;
  }

  // Floyd's sampling of `pairs` distinct indices in [0, total).
  Rng rng(seed);
  std::set<std::uint64_t> chosen;
  for (std::uint64_t j = total - pairs; j < total; ++j) {
    const std::uint64_t t = rng.below(j + 1);
    if (!chosen.insert(t).second) chosen.insert(j);
  }

  // Index i enumerates pairs row by row: (0,1), (0,2), ..., (1,2), ...
  out.reserve(pairs);
  std::size_t a = 0;
  std::uint64_t row_start = 0;
  for (std::uint64_t idx : chosen) {
    while (idx >= row_start + (length - 1 - a)) {
      row_start += length - 1 - a;
      ++a;
    }
    out.emplace_back(a, a + 1 + static_cast<std::size_t>(idx - row_start));
  }
  return out;
}

std::uint64_t sequence_seed(const SequenceTrace& seq, std::uint64_t seed) {
  return mix_keys({seed, fnv1a64(seq.sequence_id()), fnv1a64(seq.language_tag()),
                   fnv1a64(seq.domain_tag()), fnv1a64(seq.pair_key())});
}

ConsistencyProfile consistency_profile(const TraceSlice& slice, const ModelSpec& spec,
                                       std::size_t pairs, std::uint64_t seed) {
  if (pairs == 0) throw DomainError("consistency_profile: pairs must be positive");
  ConsistencyProfile prof;
  prof.language_tag = slice_language(slice);
  const auto layers = static_cast<std::size_t>(spec.num_layers);
  std::vector<std::vector<double>> rows;
  for (const SequenceTrace* s : slice) {
    if (s->length() < 2) {
      ++prof.n_skipped;
      continue;
    }
    const auto token_pairs = consistency_pairs(s->length(), pairs, sequence_seed(*s, seed));
    prof.pairs_sampled += token_pairs.size();
    std::vector<double> row(layers);
    std::vector<std::uint64_t> by_overlap(static_cast<std::size_t>(spec.top_k) + 1);
    for (int l = 0; l < spec.num_layers; ++l) {
      std::fill(by_overlap.begin(), by_overlap.end(), 0);
      for (const auto& [a, b] : token_pairs) {
        const auto sa = s->at(a, l).selected;
        const auto sb = s->at(b, l).selected;
        std::size_t shared = 0;
        for (std::int32_t x : sa)
          if (std::find(sb.begin(), sb.end(), x) != sb.end()) ++shared;
        ++by_overlap[shared];
      }
      row[static_cast<std::size_t>(l)] = mean_jaccard_of_overlaps(by_overlap, spec.top_k);
    }
    rows.push_back(std::move(row));
  }
  prof.n_sequences = rows.size();
  prof.mean_jaccard.assign(layers, 0.0);
  if (!rows.empty()) {
    prof.mean_jaccard = detail::sorted_column_sums(rows, layers);
    for (double& v : prof.mean_jaccard) v /= static_cast<double>(rows.size());
  }
  return prof;
}

double correlate(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DomainError("correlate: input lengths differ");
  if (xs.size() < 3) throw DomainError("correlate: need at least 3 points");
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i]))
      throw DomainError("correlate: non-finite value");
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelationError("correlate: zero variance input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::string divergence_csv(const std::vector<DivergenceProfile>& profiles) {
  std::string out = "language,layer,mean_hjs,n_pairs\n";
  for (const auto& p : profiles)
    for (std::size_t l = 0; l < p.mean_hjs.size(); ++l)
      out += csv_field(p.language_tag) + "," + std::to_string(l) + "," + format_double(p.mean_hjs[l]) + "," +
             std::to_string(p.n_pairs) + "\n";
  return out;
}

std::string entropy_csv(const std::vector<EntropyProfile>& profiles) {
  std::string out = "language,layer,mean_entropy_nats,n_tokens\n";
  for (const auto& p : profiles)
    for (std::size_t l = 0; l < p.mean_entropy.size(); ++l)
      out += csv_field(p.language_tag) + "," + std::to_string(l) + "," + format_double(p.mean_entropy[l]) +
             "," + std::to_string(p.n_tokens) + "\n";
  return out;
}

std::string consistency_csv(const std::vector<ConsistencyProfile>& profiles) {
  std::string out = "language,layer,mean_jaccard,n_sequences\n";
  for (const auto& p : profiles)
    for (std::size_t l = 0; l < p.mean_jaccard.size(); ++l)
      out += csv_field(p.language_tag) + "," + std::to_string(l) + "," + format_double(p.mean_jaccard[l]) +
             "," + std::to_string(p.n_sequences) + "\n";
  return out;
}

}  // namespace routelab
