#include "routelab/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "routelab/errors.hpp"
#include "routelab/rng.hpp"

namespace routelab {

namespace {

enum class Role : std::uint64_t { embedding = 1, router = 2, w_in = 3, w_out = 4 };

void fill_uniform(std::span<double> out, const SimConfig& c, Role role, int layer, int expert) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.hidden_dim));
  Rng rng(mix_keys({c.seed, static_cast<std::uint64_t>(role), static_cast<std::uint64_t>(layer),
                    static_cast<std::uint64_t>(expert)}));
  for (double& v : out) v = rng.uniform(-bound, bound);
}

}  // namespace

std::string_view to_string(Mixing mixing) { return mixing == Mixing::none ? "none" : "causal_mean"; }

Mixing parse_mixing(std::string_view text) {
  if (text == "none") return Mixing::none;
  if (text == "causal_mean") return Mixing::causal_mean;
  throw ConfigError("unknown mixing '" + std::string(text) + "'");
}

void SimConfig::validate() const {
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
  if (top_k < 1 || top_k > num_experts) throw ConfigError("top_k must be in [1, num_experts]");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (expert_hidden_multiplier < 1) throw ConfigError("expert_hidden_multiplier must be >= 1");
}

ModelSpec SimConfig::model_spec() const {
  return {model_name, num_layers, num_experts, top_k, NormMode::softmax_all};
}

SimConfig sim_config_from_json(const std::string& text) {
  SimConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.model_name = j.value("model_name", c.model_name);
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_experts = j.at("num_experts").get<int>();
    c.top_k = j.at("top_k").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.expert_hidden_multiplier = j.value("expert_hidden_multiplier", 4);
    c.seed = j.value("seed", std::uint64_t{0});
    c.mixing = parse_mixing(j.value("mixing", std::string("none")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid sim config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string sim_config_to_json(const SimConfig& c) {
  nlohmann::ordered_json j;
  j["model_name"] = c.model_name;
  j["hidden_dim"] = c.hidden_dim;
  j["num_layers"] = c.num_layers;
  j["num_experts"] = c.num_experts;
  j["top_k"] = c.top_k;
  j["vocab_size"] = c.vocab_size;
  j["expert_hidden_multiplier"] = c.expert_hidden_multiplier;
  j["seed"] = c.seed;
  j["mixing"] = to_string(c.mixing);
  return j.dump(2) + "\n";
}

SimConfig read_sim_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open sim config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return sim_config_from_json(buf.str());
}

SimState::SimState(const SimConfig& config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.hidden_dim);
  const auto e = static_cast<std::size_t>(config_.num_experts);
  const auto layers = static_cast<std::size_t>(config_.num_layers);
  const auto w = static_cast<std::size_t>(expert_width());

  embedding_.resize(static_cast<std::size_t>(config_.vocab_size) * d);
  fill_uniform(embedding_, config_, Role::embedding, 0, 0);

  router_.resize(layers * e * d);
  w_in_.resize(layers * e * w * d);
  w_out_.resize(layers * e * d * w);
  for (int l = 0; l < config_.num_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    fill_uniform(std::span<double>(router_).subspan(li * e * d, e * d), config_, Role::router, l, 0);
    for (int x = 0; x < config_.num_experts; ++x) {
      const std::size_t block = li * e + static_cast<std::size_t>(x);
      fill_uniform(std::span<double>(w_in_).subspan(block * w * d, w * d), config_, Role::w_in, l, x);
      fill_uniform(std::span<double>(w_out_).subspan(block * d * w, d * w), config_, Role::w_out, l, x);
    }
  }
}

std::span<const double> SimState::embedding(int token) const {
  const auto d = static_cast<std::size_t>(config_.hidden_dim);
  return std::span<const double>(embedding_).subspan(static_cast<std::size_t>(token) * d, d);
}

std::span<const double> SimState::router(int layer) const {
  const auto n = static_cast<std::size_t>(config_.num_experts * config_.hidden_dim);
  return std::span<const double>(router_).subspan(static_cast<std::size_t>(layer) * n, n);
}

std::span<const double> SimState::w_in(int layer, int expert) const {
  const auto n = static_cast<std::size_t>(expert_width() * config_.hidden_dim);
  const auto block = static_cast<std::size_t>(layer * config_.num_experts + expert);
  return std::span<const double>(w_in_).subspan(block * n, n);
}

std::span<const double> SimState::w_out(int layer, int expert) const {
  const auto n = static_cast<std::size_t>(expert_width() * config_.hidden_dim);
  const auto block = static_cast<std::size_t>(layer * config_.num_experts + expert);
  return std::span<const double>(w_out_).subspan(block * n, n);
}

SimState init_sim(const SimConfig& config) { return SimState(config); }

std::vector<CorpusEntry> read_corpus(std::istream& in) {
  std::vector<CorpusEntry> corpus;
  std::string line;
  std::uint64_t line_no = 0;
  std::uint64_t offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::uint64_t start = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusEntry entry;
      entry.meta.sequence_id = j.at("sequence_id").get<std::string>();
      entry.meta.language_tag = j.at("language_tag").get<std::string>();
      entry.meta.domain_tag = j.at("domain_tag").get<std::string>();
      entry.meta.pair_key = j.value("pair_key", std::string());
      entry.token_ids = j.at("token_ids").get<std::vector<int>>();
      corpus.push_back(std::move(entry));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(e.what(), line_no, start + (e.byte > 0 ? e.byte - 1 : 0), "");
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no, start, "");
    }
  }
  if (in.bad()) throw IoError("corpus read failed", offset);
  return corpus;
}

std::vector<CorpusEntry> read_corpus_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  return read_corpus(in);
}

std::string corpus_to_jsonl(const std::vector<CorpusEntry>& corpus) {
  std::string out;
  for (const auto& e : corpus) {
    nlohmann::ordered_json j;
    j["sequence_id"] = e.meta.sequence_id;
    j["language_tag"] = e.meta.language_tag;
    j["domain_tag"] = e.meta.domain_tag;
    j["pair_key"] = e.meta.pair_key;
    j["token_ids"] = e.token_ids;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<int> top_k_indices(std::span<const double> values, int k) {
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    const double va = values[static_cast<std::size_t>(a)];
    const double vb = values[static_cast<std::size_t>(b)];
    return va > vb || (va == vb && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

namespace {

void check_entry(const SimConfig& c, const CorpusEntry& entry, std::size_t index) {
  const std::string where = "sequence #" + std::to_string(index) + " ('" + entry.meta.sequence_id + "')";
  if (entry.meta.sequence_id.empty() || entry.meta.language_tag.empty() ||
      entry.meta.domain_tag.empty())
    throw ValidationError(where + ": sequence_id, language_tag and domain_tag must be non-empty");
  if (entry.token_ids.empty()) throw ValidationError(where + ": empty token sequence");
  for (int t : entry.token_ids)
    if (t < 0 || t >= c.vocab_size)
      throw ValidationError(where + ": token id " + std::to_string(t) + " outside vocabulary");
}

ForwardResult forward_unchecked(const SimState& state, const CorpusEntry& entry,
                                const InterventionPlan* plan) {
  const SimConfig& c = state.config();
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  const auto e = static_cast<std::size_t>(c.num_experts);
  const auto w = static_cast<std::size_t>(state.expert_width());
  const std::size_t len = entry.token_ids.size();

  ForwardResult res;
  res.trace = SequenceTrace(entry.meta, c.model_spec(), len);
  res.hidden.resize(len * d);
  for (std::size_t t = 0; t < len; ++t) {
    auto emb = state.embedding(entry.token_ids[t]);
    std::copy(emb.begin(), emb.end(), res.hidden.begin() + static_cast<std::ptrdiff_t>(t * d));
  }

  const TokenKey base_key{fnv1a64(entry.meta.sequence_id), 0};
  std::vector<double> mixed(len * d);
  std::vector<double> prefix(d);
  std::vector<double> z(e), edited(e), mid(w), out(d);

  for (int l = 0; l < c.num_layers; ++l) {
    if (c.mixing == Mixing::causal_mean) {
      std::fill(prefix.begin(), prefix.end(), 0.0);
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
          prefix[i] += res.hidden[t * d + i];
          mixed[t * d + i] = prefix[i] / static_cast<double>(t + 1);
        }
    } else {
      mixed = res.hidden;
    }

    const auto router = state.router(l);
    const bool intervene = plan != nullptr && plan->touches(l);
    for (std::size_t t = 0; t < len; ++t) {
      const double* h = &mixed[t * d];
      for (std::size_t x = 0; x < e; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += router[x * d + i] * h[i];
        // Router output at stored (32-bit) precision.
        z[x] = static_cast<double>(static_cast<float>(acc));
      }
      std::span<const double> routed = z;
      if (intervene) {
        apply_plan(*plan, l, z, edited, TokenKey{base_key.sequence_hash, t});
        routed = edited;
      }
      const std::vector<int> chosen = top_k_indices(routed, c.top_k);

      double peak = routed[static_cast<std::size_t>(chosen.front())];
      std::vector<double> gate(chosen.size());
      double total = 0.0;
      for (std::size_t s = 0; s < chosen.size(); ++s) {
        gate[s] = std::exp(routed[static_cast<std::size_t>(chosen[s])] - peak);
        total += gate[s];
      }

      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t s = 0; s < chosen.size(); ++s) {
        const auto w_in = state.w_in(l, chosen[s]);
        const auto w_out = state.w_out(l, chosen[s]);
        for (std::size_t r = 0; r < w; ++r) {
          double acc = 0.0;
          for (std::size_t i = 0; i < d; ++i) acc += w_in[r * d + i] * h[i];
          mid[r] = acc > 0.0 ? acc : 0.0;
        }
        const double g = gate[s] / total;
        for (std::size_t i = 0; i < d; ++i) {
          double acc = 0.0;
          for (std::size_t r = 0; r < w; ++r) acc += w_out[i * w + r] * mid[r];
          out[i] += g * acc;
        }
      }
      for (std::size_t i = 0; i < d; ++i) res.hidden[t * d + i] = h[i] + out[i];

      auto logits = res.trace.logits(t, l);
      for (std::size_t x = 0; x < e; ++x) logits[x] = static_cast<float>(routed[x]);
      auto sel = res.trace.selected(t, l);
      for (std::size_t s = 0; s < chosen.size(); ++s) sel[s] = chosen[s];
    }
  }
  return res;
}

void check_plan(const SimConfig& c, const InterventionPlan* plan) {
  if (plan) plan->validate_for(c.num_layers, c.num_experts, c.top_k);
}

}  // namespace

ForwardResult forward(const SimState& state, const CorpusEntry& entry, const InterventionPlan* plan) {
  check_plan(state.config(), plan);
  check_entry(state.config(), entry, 0);
  return forward_unchecked(state, entry, plan);
}

TraceSet run_corpus(const SimState& state, const std::vector<CorpusEntry>& corpus,
                    const InterventionPlan* plan, unsigned threads) {
  check_plan(state.config(), plan);
  for (std::size_t i = 0; i < corpus.size(); ++i) check_entry(state.config(), corpus[i], i);

  TraceSet set;
  set.spec = state.config().model_spec();
  set.sequences.resize(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t i) {
    set.sequences[i] = forward_unchecked(state, corpus[i], plan).trace;
  });
  return set;
}

}  // namespace routelab
