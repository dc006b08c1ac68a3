#include "routelab/planted.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "routelab/errors.hpp"
#include "routelab/parallel.hpp"
#include "routelab/rng.hpp"
#include "routelab/sim.hpp"

namespace routelab {

namespace {

void check_pool(const std::vector<int>& pool, int num_experts, const std::string& name) {
  std::set<int> seen;
  for (int e : pool) {
    if (e < 0 || e >= num_experts)
      throw ConfigError(name + ": expert " + std::to_string(e) + " outside [0, " +
                        std::to_string(num_experts) + ")");
    if (!seen.insert(e).second) throw ConfigError(name + ": duplicate expert " + std::to_string(e));
  }
}

}  // namespace

void PlantedSpec::validate() const {
  try {
    spec.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  if (languages.empty()) throw ConfigError("planted spec needs at least one language");
  if (num_pairs < 1) throw ConfigError("num_pairs must be >= 1");
  if (tokens_per_sequence < 1) throw ConfigError("tokens_per_sequence must be >= 1");
  if (!middle_band.valid_for(spec.num_layers))
    throw ConfigError("middle_band " + middle_band.str() + " outside [0, num_layers)");
  if (!(alignment_noise >= 0.0) || !std::isfinite(alignment_noise))
    throw ConfigError("alignment_noise must be finite and >= 0");
  if (!(shared_noise >= 0.0) || !std::isfinite(shared_noise))
    throw ConfigError("shared_noise must be finite and >= 0");
  if (!std::isfinite(base_logit) || !std::isfinite(concentration_slope))
    throw ConfigError("base_logit and concentration_slope must be finite");
  if (generic_domain.empty()) throw ConfigError("generic_domain must be non-empty");
  check_pool(shared_pool, spec.num_experts, "shared_pool");

  std::set<std::string> tags;
  std::set<int> claimed;
  for (const auto& lang : languages) {
    if (lang.tag.empty()) throw ConfigError("language tag must be non-empty");
    if (!tags.insert(lang.tag).second) throw ConfigError("duplicate language '" + lang.tag + "'");
    if (!(lang.proficiency >= 0.0 && lang.proficiency <= 1.0))
      throw ConfigError("language '" + lang.tag + "': proficiency must be in [0, 1]");
    check_pool(lang.outer_pool, spec.num_experts, "outer_pool of '" + lang.tag + "'");
    for (int e : lang.outer_pool)
      if (!claimed.insert(e).second)
        throw ConfigError("outer pools overlap: expert " + std::to_string(e) + " of '" + lang.tag +
                          "' already belongs to another language");
  }
  const PlantedLanguage& ref = reference_language();
  if (ref.proficiency != 1.0)
    throw ConfigError("reference language '" + ref.tag + "' must have proficiency 1.0");

  std::set<std::string> domain_tags{generic_domain};
  for (const auto& d : domains) {
    if (d.tag.empty() || !domain_tags.insert(d.tag).second)
      throw ConfigError("domain tags must be non-empty and distinct");
    check_pool(d.task_pool, spec.num_experts, "task_pool of '" + d.tag + "'");
    if (!std::isfinite(d.boost)) throw ConfigError("domain '" + d.tag + "': boost must be finite");
    for (const auto& l : d.languages)
      if (!tags.count(l)) throw ConfigError("domain '" + d.tag + "': unknown language '" + l + "'");
  }
}

const PlantedLanguage& PlantedSpec::reference_language() const {
  for (const auto& lang : languages)
    if (reference.empty() ? lang.proficiency == 1.0 : lang.tag == reference) return lang;
  throw ConfigError(reference.empty() ? "no language has proficiency 1.0"
                                      : "reference language '" + reference + "' not listed");
}

PlantedSpec default_planted_spec() {
  PlantedSpec p;
  p.spec = {"planted-16x2", 12, 16, 2, NormMode::softmax_all};
  const char* tags[] = {"eng_Latn", "fra_Latn", "zho_Hans", "hin_Deva",
                        "ben_Beng", "swh_Latn", "yor_Latn", "bam_Latn"};
  for (int i = 0; i < 8; ++i)
    p.languages.push_back({tags[i], 1.0 - 0.1 * i, {i}});
  p.languages.front().proficiency = 1.0;
  p.reference = "eng_Latn";
  p.num_pairs = 64;
  p.tokens_per_sequence = 32;
  p.middle_band = {4, 8};
  p.shared_pool = {8, 9};
  p.alignment_noise = 5.0;
  p.shared_noise = 1.0;
  p.base_logit = 4.0;
  p.concentration_slope = 0.2;
  p.domains.push_back({"math", {12, 13, 14}, 6.0, {}});
  p.seed = 20240601;
  return p;
}

PlantedSpec planted_spec_from_json(const std::string& text) {
  PlantedSpec p;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& s = j.at("spec");
    p.spec.model_name = s.value("model_name", std::string("planted"));
    p.spec.num_layers = s.at("num_layers").get<int>();
    p.spec.num_experts = s.at("num_experts").get<int>();
    p.spec.top_k = s.at("top_k").get<int>();
    p.spec.norm_mode = parse_norm_mode(s.value("norm_mode", std::string("softmax_all")));
    for (const auto& lj : j.at("languages"))
      p.languages.push_back({lj.at("tag").get<std::string>(), lj.at("proficiency").get<double>(),
                             lj.at("outer_pool").get<std::vector<int>>()});
    p.reference = j.value("reference", std::string());
    p.num_pairs = j.at("num_pairs").get<int>();
    p.tokens_per_sequence = j.at("tokens_per_sequence").get<int>();
    const auto band = j.at("middle_band").get<std::vector<int>>();
    if (band.size() != 2) throw ConfigError("middle_band must be [lo, hi]");
    p.middle_band = {band[0], band[1]};
    p.shared_pool = j.at("shared_pool").get<std::vector<int>>();
    p.alignment_noise = j.value("alignment_noise", 0.0);
    p.shared_noise = j.value("shared_noise", 1.0);
    p.base_logit = j.value("base_logit", 4.0);
    p.concentration_slope = j.value("concentration_slope", 0.0);
    p.generic_domain = j.value("generic_domain", std::string("generic"));
    if (j.contains("domains"))
      for (const auto& dj : j.at("domains"))
        p.domains.push_back({dj.at("tag").get<std::string>(),
                             dj.at("task_pool").get<std::vector<int>>(), dj.value("boost", 4.0),
                             dj.value("languages", std::vector<std::string>{})});
    p.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid planted spec: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  p.validate();
  return p;
}

std::string planted_spec_to_json(const PlantedSpec& p) {
  nlohmann::ordered_json j;
  j["spec"] = {{"model_name", p.spec.model_name},
               {"num_layers", p.spec.num_layers},
               {"num_experts", p.spec.num_experts},
               {"top_k", p.spec.top_k},
               {"norm_mode", to_string(p.spec.norm_mode)}};
  j["languages"] = nlohmann::ordered_json::array();
  for (const auto& l : p.languages)
    j["languages"].push_back(
        {{"tag", l.tag}, {"proficiency", l.proficiency}, {"outer_pool", l.outer_pool}});
  j["reference"] = p.reference;
  j["num_pairs"] = p.num_pairs;
  j["tokens_per_sequence"] = p.tokens_per_sequence;
  j["middle_band"] = {p.middle_band.first, p.middle_band.last};
  j["shared_pool"] = p.shared_pool;
  j["alignment_noise"] = p.alignment_noise;
  j["shared_noise"] = p.shared_noise;
  j["base_logit"] = p.base_logit;
  j["concentration_slope"] = p.concentration_slope;
  j["generic_domain"] = p.generic_domain;
  j["domains"] = nlohmann::ordered_json::array();
  for (const auto& d : p.domains)
    j["domains"].push_back(
        {{"tag", d.tag}, {"task_pool", d.task_pool}, {"boost", d.boost}, {"languages", d.languages}});
  j["seed"] = p.seed;
  return j.dump(2) + "\n";
}

PlantedSpec read_planted_spec_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open planted spec '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return planted_spec_from_json(buf.str());
}

namespace {

struct Job {
  const PlantedLanguage* language;
  const PlantedDomain* domain;  // null for the generic corpus
  int pair;
};

SequenceTrace generate_sequence(const PlantedSpec& p, const Job& job) {
  const std::string& domain_tag = job.domain ? job.domain->tag : p.generic_domain;
  const std::string pair_key = "p" + std::to_string(job.pair);
  SequenceMeta meta{job.language->tag + "/" + domain_tag + "/" + pair_key, job.language->tag,
                    domain_tag, pair_key};
  const auto tokens = static_cast<std::size_t>(p.tokens_per_sequence);
  SequenceTrace seq(std::move(meta), p.spec, tokens);

  const auto pair_id = static_cast<std::uint64_t>(job.pair);
  Rng shared(mix_keys({p.seed, 1, fnv1a64(domain_tag), pair_id}));
  Rng own(mix_keys({p.seed, 2, fnv1a64(job.language->tag), fnv1a64(domain_tag), pair_id}));
  const double lang_scale = p.alignment_noise * (1.0 - job.language->proficiency);

  const auto e = static_cast<std::size_t>(p.spec.num_experts);
  std::vector<double> z(e);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (int l = 0; l < p.spec.num_layers; ++l) {
      const bool middle = p.middle_band.contains(l);
      const double b = p.base_logit + p.concentration_slope * l;
      std::fill(z.begin(), z.end(), 0.0);
      for (int x : middle ? p.shared_pool : job.language->outer_pool) z[static_cast<std::size_t>(x)] += b;
      if (job.domain)
        for (int x : job.domain->task_pool) z[static_cast<std::size_t>(x)] += job.domain->boost;
      // Both streams are always advanced so every (token, layer) draws the
      // same positions regardless of which scales are zero.
      for (std::size_t x = 0; x < e; ++x) {
        const double g_pair = shared.normal();
        const double g_lang = own.normal();
        z[x] += p.shared_noise * g_pair + (middle ? lang_scale * g_lang : 0.0);
      }
      auto logits = seq.logits(t, l);
      for (std::size_t x = 0; x < e; ++x) {
        logits[x] = static_cast<float>(z[x]);
        z[x] = logits[x];
      }
      const auto chosen = top_k_indices(z, p.spec.top_k);
      std::copy(chosen.begin(), chosen.end(), seq.selected(t, l).begin());
    }
  }
  return seq;
}

}  // namespace

TraceSet generate(const PlantedSpec& planted) {
  planted.validate();
  std::vector<Job> jobs;
  for (const auto& lang : planted.languages)
    for (int i = 0; i < planted.num_pairs; ++i) jobs.push_back({&lang, nullptr, i});
  const PlantedLanguage& ref = planted.reference_language();
  for (const auto& dom : planted.domains)
    for (const auto& lang : planted.languages) {
      const bool wanted = dom.languages.empty()
                              ? lang.tag == ref.tag
                              : std::find(dom.languages.begin(), dom.languages.end(), lang.tag) !=
                                    dom.languages.end();
      if (!wanted) continue;
      for (int i = 0; i < planted.num_pairs; ++i) jobs.push_back({&lang, &dom, i});
    }

  TraceSet set;
  set.spec = planted.spec;
  set.sequences.resize(jobs.size());
  parallel_for(jobs.size(), default_thread_count(),
               [&](std::size_t i) { set.sequences[i] = generate_sequence(planted, jobs[i]); });
  return set;
}

}  // namespace routelab
