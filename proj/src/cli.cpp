#include "routelab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "routelab/errors.hpp"
#include "routelab/experts.hpp"
#include "routelab/intervention.hpp"
#include "routelab/metrics.hpp"
#include "routelab/parallel.hpp"
#include "routelab/planted.hpp"
#include "routelab/sim.hpp"
#include "routelab/trace_io.hpp"

namespace routelab {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return buf.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text_file(path)); }

void write_text_file(const fs::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

int CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (field_started || !field.empty() || !record.empty()) {
        record.push_back(std::move(field));
        records.push_back(std::move(record));
      }
      record.clear();
      field.clear();
      field_started = false;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw ParseError("unterminated quoted CSV field", records.size() + 1, text.size(), "");
  if (field_started || !field.empty() || !record.empty()) {
    record.push_back(std::move(field));
    records.push_back(std::move(record));
  }
  CsvTable table;
  if (records.empty()) return table;
  table.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size())
      throw ParseError("CSV row has " + std::to_string(records[r].size()) + " fields, expected " +
                           std::to_string(table.header.size()),
                       r + 1, 0, "");
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

namespace {

std::optional<double> parse_number(const std::string& text) {
  if (text.empty()) return std::nullopt;
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

}  // namespace

std::string csv_to_json(const CsvTable& table) {
  ojson rows = ojson::array();
  for (const auto& row : table.rows) {
    ojson obj;
    for (std::size_t i = 0; i < row.size(); ++i) {
      long long as_int = 0;
      auto [ptr, ec] = std::from_chars(row[i].data(), row[i].data() + row[i].size(), as_int);
      if (!row[i].empty() && ec == std::errc() && ptr == row[i].data() + row[i].size())
        obj[table.header[i]] = as_int;
      else if (auto v = parse_number(row[i]))
        obj[table.header[i]] = *v;
      else
        obj[table.header[i]] = row[i];
    }
    rows.push_back(std::move(obj));
  }
  return rows.dump(2) + "\n";
}

namespace {

// Collects what the run manifest records and owns every output write.
class Run {
 public:
  Run(std::vector<std::string> command, fs::path out)
      : command_(std::move(command)), out_(std::move(out)), start_(std::chrono::steady_clock::now()) {}

  std::string input(const std::string& role, const fs::path& path) {
    std::string content = read_text_file(path);
    inputs_.push_back({{"role", role}, {"path", path.string()}, {"sha256", sha256_hex(content)}});
    return content;
  }
  void seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }

  void output(const fs::path& path, std::string_view content) {
    write_text_file(path, content);
    outputs_.push_back({{"path", path.string()}, {"sha256", sha256_hex(content)}});
  }

  // CSV output plus, with --emit json, a JSON mirror next to it.
  void csv_output(const fs::path& path, const std::string& csv, bool emit_json) {
    output(path, csv);
    if (emit_json) {
      fs::path mirror = path;
      mirror.replace_extension(".json");
      if (mirror == path) mirror += ".json";
      output(mirror, csv_to_json(parse_csv(csv)));
    }
  }

  void finish(const std::optional<fs::path>& manifest_path) {
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    ojson m;
    m["tool"] = "routelab";
    m["version"] = std::string(kToolVersion);
    m["command"] = command_;
    m["seeds"] = seeds_.is_null() ? ojson::object() : seeds_;
    m["inputs"] = inputs_.is_null() ? ojson::array() : inputs_;
    m["outputs"] = outputs_.is_null() ? ojson::array() : outputs_;
    m["wall_clock_seconds"] = seconds;
    fs::path path = manifest_path ? *manifest_path : fs::path(out_.string() + ".manifest.json");
    write_text_file(path, m.dump(2) + "\n");
  }

 private:
  std::vector<std::string> command_;
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  ojson inputs_;
  ojson outputs_;
  ojson seeds_;
};

bool same_shape(const ModelSpec& a, const ModelSpec& b) {
  return a.num_layers == b.num_layers && a.num_experts == b.num_experts && a.top_k == b.top_k &&
         a.norm_mode == b.norm_mode;
}

TraceSet load_traces(Run& run, const std::vector<std::string>& paths) {
  TraceSet merged;
  bool first = true;
  for (const auto& path : paths) {
    std::istringstream in(run.input("trace", path));
    TraceSet set = read_trace(in);
    if (first) {
      merged.spec = set.spec;
      first = false;
    } else if (!same_shape(merged.spec, set.spec)) {
      throw ValidationError("spec mismatch: '" + path + "' does not share the model spec of '" +
                            paths.front() + "'");
    }
    for (auto& s : set.sequences) merged.sequences.push_back(std::move(s));
  }
  validate_trace_set(merged);
  return merged;
}

std::optional<LayerRange> optional_range(const std::string& text, int num_layers) {
  if (text.empty()) return std::nullopt;
  LayerRange r = parse_layer_range(text);
  if (!r.valid_for(num_layers))
    throw ValidationError("layer range " + r.str() + " outside model depth " +
                          std::to_string(num_layers));
  return r;
}

struct Options {
  std::vector<std::string> traces;
  std::string out;
  std::string manifest;
  std::string emit = "csv";

  // sim
  std::string config, corpus, plan;
  unsigned threads = 0;

  // synth
  std::string planted;
  std::string scores_out;
  bool use_default = false;

  // analyze
  std::string ref;
  std::string domain;
  std::size_t pairs = kDefaultConsistencyPairs;
  std::uint64_t seed = 0;
  std::string divergence_csv, scores_csv, band;
  std::string slice_a, slice_b;
  std::string layers;

  // experts
  std::string target, baseline, label, delta_csv, set_a, set_b;
  std::vector<std::string> languages;
  double tau = 0.0;

  // plan
  std::string experts_json, mode = "soft", direction = "activate", model;
  double lambda = 0.5;
  double sigma = kDefaultPerturbationSigma;
  int num_layers = 0, num_experts = 0, top_k = 0;
};

int cmd_sim(const Options& o, Run& run) {
  const SimConfig config = sim_config_from_json(run.input("config", o.config));
  std::istringstream corpus_in(run.input("corpus", o.corpus));
  const auto corpus = read_corpus(corpus_in);
  std::optional<InterventionPlan> plan;
  if (!o.plan.empty()) {
    plan = plan_from_json(run.input("plan", o.plan));
    plan->validate_for(config.num_layers, config.num_experts, config.top_k);
    run.seed("plan_rng_seed", plan->rng_seed);
  }
  run.seed("sim_seed", config.seed);
  const SimState state = init_sim(config);
  const TraceSet traces = run_corpus(state, corpus, plan ? &*plan : nullptr,
                                     o.threads ? o.threads : default_thread_count());
  std::ostringstream buf;
  write_trace(traces, buf);
  run.output(o.out, buf.str());
  return kExitOk;
}

int cmd_synth(const Options& o, Run& run) {
  const PlantedSpec planted = o.planted.empty() ? default_planted_spec()
                                                : planted_spec_from_json(run.input("planted", o.planted));
  run.seed("planted_seed", planted.seed);
  const TraceSet traces = generate(planted);
  std::ostringstream buf;
  write_trace(traces, buf);
  run.output(o.out, buf.str());
  if (!o.scores_out.empty()) {
    std::string csv = "language,score\n";
    for (const auto& l : planted.languages) csv += l.tag + "," + format_double(l.proficiency) + "\n";
    run.output(o.scores_out, csv);
  }
  return kExitOk;
}

std::vector<std::string> languages_in(const TraceSlice& slice) {
  std::vector<std::string> tags;
  for (const SequenceTrace* s : slice)
    if (std::find(tags.begin(), tags.end(), s->language_tag()) == tags.end())
      tags.push_back(s->language_tag());
  return tags;
}

int cmd_divergence(const Options& o, Run& run, std::ostream& err) {
  const TraceSet set = load_traces(run, o.traces);
  const SliceSelector ref_sel{o.ref, o.domain};
  const TraceSlice ref = select(set, ref_sel);
  if (ref.empty()) throw ValidationError("no sequences for reference language '" + o.ref + "'");

  std::vector<DivergenceProfile> profiles;
  for (const auto& lang : languages_in(select(set, SliceSelector{"", o.domain}))) {
    if (lang == o.ref) continue;
    const TraceSlice cmp = select(set, SliceSelector{lang, o.domain});
    DivergenceProfile prof = divergence_profile(ref, cmp, set.spec);
    if (prof.n_unpaired)
      err << "warning: " << lang << ": " << prof.n_unpaired << " unpaired sequences skipped\n";
    profiles.push_back(std::move(prof));
  }
  // Self-comparison when the trace only holds the reference language.
  if (profiles.empty()) profiles.push_back(divergence_profile(ref, ref, set.spec));
  run.csv_output(o.out, divergence_csv(profiles), o.emit == "json");
  return kExitOk;
}

int cmd_entropy(const Options& o, Run& run) {
  const TraceSet set = load_traces(run, o.traces);
  std::vector<EntropyProfile> profiles;
  for (const auto& lang : languages_in(select(set, SliceSelector{"", o.domain})))
    profiles.push_back(entropy_profile(select(set, SliceSelector{lang, o.domain}), set.spec));
  if (profiles.empty()) throw EmptyProfileError("no sequences to analyze");
  run.csv_output(o.out, entropy_csv(profiles), o.emit == "json");
  return kExitOk;
}

int cmd_consistency(const Options& o, Run& run) {
  const TraceSet set = load_traces(run, o.traces);
  run.seed("consistency_seed", o.seed);
  std::vector<ConsistencyProfile> profiles;
  for (const auto& lang : languages_in(select(set, SliceSelector{"", o.domain})))
    profiles.push_back(
        consistency_profile(select(set, SliceSelector{lang, o.domain}), set.spec, o.pairs, o.seed));
  if (profiles.empty()) throw EmptyProfileError("no sequences to analyze");
  run.csv_output(o.out, consistency_csv(profiles), o.emit == "json");
  return kExitOk;
}

int cmd_correlate(const Options& o, Run& run) {
  const CsvTable div = parse_csv(run.input("divergence", o.divergence_csv));
  const CsvTable scores = parse_csv(run.input("scores", o.scores_csv));
  const int c_lang = div.column("language"), c_layer = div.column("layer"), c_hjs = div.column("mean_hjs");
  const int s_lang = scores.column("language"), s_score = scores.column("score");
  if (c_lang < 0 || c_layer < 0 || c_hjs < 0)
    throw ValidationError("divergence CSV needs language, layer, mean_hjs columns");
  if (s_lang < 0 || s_score < 0) throw ValidationError("scores CSV needs language, score columns");

  std::map<std::string, double> score;
  for (const auto& row : scores.rows) {
    auto v = parse_number(row[static_cast<std::size_t>(s_score)]);
    if (!v) throw ValidationError("non-numeric score for '" + row[static_cast<std::size_t>(s_lang)] + "'");
    score[row[static_cast<std::size_t>(s_lang)]] = *v;
  }
  // layer -> language -> divergence
  std::map<int, std::map<std::string, double>> by_layer;
  for (const auto& row : div.rows) {
    auto layer = parse_number(row[static_cast<std::size_t>(c_layer)]);
    auto v = parse_number(row[static_cast<std::size_t>(c_hjs)]);
    if (!layer || !v) throw ValidationError("non-numeric layer or mean_hjs in divergence CSV");
    by_layer[static_cast<int>(*layer)][row[static_cast<std::size_t>(c_lang)]] = *v;
  }

  auto correlation = [&](const std::map<std::string, double>& divergence) {
    std::vector<double> xs, ys;
    for (const auto& [lang, d] : divergence) {
      auto it = score.find(lang);
      if (it == score.end()) continue;
      xs.push_back(d);
      ys.push_back(it->second);
    }
    return std::pair{xs, ys};
  };

  ojson out = ojson::array();
  for (const auto& [layer, divergence] : by_layer) {
    auto [xs, ys] = correlation(divergence);
    ojson entry{{"layer", layer}};
    try {
      entry["r"] = correlate(xs, ys);
    } catch (const Error&) {
      entry["r"] = nullptr;
    }
    entry["n"] = xs.size();
    out.push_back(std::move(entry));
  }
  if (!o.band.empty()) {
    const LayerRange band = parse_layer_range(o.band);
    std::map<std::string, std::pair<double, int>> acc;
    for (const auto& [layer, divergence] : by_layer) {
      if (!band.contains(layer)) continue;
      for (const auto& [lang, d] : divergence) {
        acc[lang].first += d;
        acc[lang].second += 1;
      }
    }
    std::map<std::string, double> mean;
    for (const auto& [lang, s] : acc) mean[lang] = s.first / s.second;
    auto [xs, ys] = correlation(mean);
    out.push_back({{"layer", {band.first, band.last}}, {"r", correlate(xs, ys)}, {"n", xs.size()}});
  }
  run.output(o.out, out.dump(2) + "\n");
  return kExitOk;
}

int cmd_corpus_divergence(const Options& o, Run& run) {
  const TraceSet set = load_traces(run, o.traces);
  const TraceSlice a = select(set, SliceSelector::parse(o.slice_a));
  const TraceSlice b = select(set, SliceSelector::parse(o.slice_b));
  if (a.empty() || b.empty()) throw ValidationError("corpus-divergence: a slice selects no sequences");
  const auto layers = optional_range(o.layers, set.spec.num_layers);
  std::string csv = "slice_a,slice_b,layer,hjs,n_a,n_b\n";
  for (int l = 0; l < set.spec.num_layers; ++l) {
    if (layers && !layers->contains(l)) continue;
    csv += o.slice_a + "," + o.slice_b + "," + std::to_string(l) + "," +
           format_double(corpus_divergence(a, b, l, set.spec)) + "," + std::to_string(a.size()) +
           "," + std::to_string(b.size()) + "\n";
  }
  run.csv_output(o.out, csv, o.emit == "json");
  return kExitOk;
}

int cmd_identify(const Options& o, Run& run) {
  const TraceSet set = load_traces(run, o.traces);
  const TraceSlice target = select(set, SliceSelector::parse(o.target));
  const TraceSlice baseline = select(set, SliceSelector::parse(o.baseline));
  if (target.empty() || baseline.empty())
    throw ValidationError("identify: target or baseline selects no sequences");
  const DeltaProfile dp = delta(activation_frequency(target, set.spec),
                                activation_frequency(baseline, set.spec), o.target, o.baseline);
  const ExpertSet experts =
      select_experts(dp, o.tau, optional_range(o.layers, set.spec.num_layers),
                     o.label.empty() ? o.target : o.label);
  run.output(o.out, expert_set_to_json(experts));
  if (!o.delta_csv.empty()) run.csv_output(o.delta_csv, delta_to_csv(dp), o.emit == "json");
  return kExitOk;
}

int cmd_union(const Options& o, Run& run) {
  const TraceSet set = load_traces(run, o.traces);
  const SliceSelector base_sel = SliceSelector::parse(o.baseline);
  const TraceSlice baseline = select(set, base_sel);
  if (baseline.empty()) throw ValidationError("union: baseline selects no sequences");
  const ActivationFrequency base_freq = activation_frequency(baseline, set.spec);
  const std::string domain = base_sel.domain;

  std::vector<std::string> langs = o.languages;
  if (langs.empty())
    for (const auto& l : languages_in(select(set, SliceSelector{"", domain})))
      if (l != base_sel.language) langs.push_back(l);
  std::vector<DeltaProfile> profiles;
  for (const auto& lang : langs) {
    const TraceSlice slice = select(set, SliceSelector{lang, domain});
    if (slice.empty()) throw ValidationError("union: no sequences for language '" + lang + "'");
    profiles.push_back(delta(activation_frequency(slice, set.spec), base_freq, lang, o.baseline));
  }
  const ExpertSet experts = multilingual_union(profiles, o.tau, optional_range(o.layers, set.spec.num_layers),
                                               o.label.empty() ? "multilingual" : o.label);
  run.output(o.out, expert_set_to_json(experts));
  return kExitOk;
}

int cmd_overlap(const Options& o, Run& run) {
  const ExpertSet a = expert_set_from_json(run.input("experts_a", o.set_a));
  const ExpertSet b = expert_set_from_json(run.input("experts_b", o.set_b));
  ojson shared = ojson::array();
  for (const auto& k : overlap(a, b)) shared.push_back({{"layer", k.layer}, {"expert", k.expert}});
  ojson out{{"a", a.label}, {"b", b.label}, {"shared", shared}};
  run.output(o.out, out.dump(2) + "\n");
  return kExitOk;
}

int cmd_plan(const Options& o, Run& run, std::ostream& err) {
  const ExpertSet experts = expert_set_from_json(run.input("experts", o.experts_json));

  ModelSpec spec;
  if (!o.model.empty()) {
    auto preset = model_preset(o.model);
    if (!preset) throw ValidationError("unknown model preset '" + o.model + "'");
    spec = *preset;
  } else if (!o.traces.empty()) {
    std::istringstream in(run.input("trace", o.traces.front()));
    spec = TraceReader(in).spec();
  } else {
    spec.num_layers = o.num_layers;
    spec.num_experts = o.num_experts;
    spec.top_k = o.top_k;
    spec.validate();
  }

  const InterventionMode mode = parse_intervention_mode(o.mode);
  const Direction direction = parse_direction(o.direction);
  run.seed("plan_rng_seed", o.seed);
  const InterventionPlan plan = build_plan(experts, mode, direction, o.lambda,
                                           optional_range(o.layers, spec.num_layers), o.seed, o.sigma);
  plan.validate_for(spec.num_layers, spec.num_experts, spec.top_k);
  if (plan.empty()) err << "warning: resulting plan has no directives\n";
  run.output(o.out, plan_to_json(plan));
  return kExitOk;
}

int cmd_validate(const Options& o, Run& run, std::ostream& out) {
  const TraceSet set = load_traces(run, o.traces);
  std::size_t tokens = 0;
  for (const auto& s : set.sequences) tokens += s.length();
  ojson summary{{"model_name", set.spec.model_name},
                {"num_layers", set.spec.num_layers},
                {"num_experts", set.spec.num_experts},
                {"top_k", set.spec.top_k},
                {"norm_mode", to_string(set.spec.norm_mode)},
                {"compact", set.compact()},
                {"sequences", set.size()},
                {"tokens", tokens},
                {"languages", language_tags(set)}};
  run.output(o.out, summary.dump(2) + "\n");
  out << "ok: " << set.size() << " sequences, " << tokens << " tokens\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"routelab: MoE routing analysis and router intervention toolkit", "routelab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--out,-o", o.out, "Output path")->required();
    cmd->add_option("--manifest", o.manifest, "Manifest path (default: <out>.manifest.json)");
  };
  auto traces = [&](CLI::App* cmd) {
    cmd->add_option("--trace,-t", o.traces, "Trace file(s)")->required()->check(CLI::ExistingFile);
  };
  auto emit = [&](CLI::App* cmd) {
    cmd->add_option("--emit", o.emit, "Also mirror CSV outputs as JSON")
        ->check(CLI::IsMember({"csv", "json"}));
  };

  auto* sim = app.add_subcommand("sim", "Run a corpus through the MoE simulator");
  sim->add_option("--config", o.config, "SimConfig JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--corpus", o.corpus, "Token corpus JSONL")->required()->check(CLI::ExistingFile);
  sim->add_option("--plan", o.plan, "Intervention plan JSON")->check(CLI::ExistingFile);
  sim->add_option("--threads", o.threads, "Worker threads (default ROUTELAB_THREADS or all cores)");
  common(sim);

  auto* synth = app.add_subcommand("synth", "Generate a planted synthetic trace");
  synth->add_option("--planted", o.planted, "PlantedSpec JSON (default: built-in spec)")
      ->check(CLI::ExistingFile)
      ->excludes(synth->add_flag("--default", o.use_default, "Use the built-in planted spec"));
  synth->add_option("--scores-out", o.scores_out, "Write language,score CSV of proficiencies");
  common(synth);

  auto* analyze = app.add_subcommand("analyze", "Routing statistics");
  analyze->require_subcommand(1);
  auto* divergence = analyze->add_subcommand("divergence", "Paired H-JS divergence from a reference language");
  traces(divergence);
  divergence->add_option("--ref", o.ref, "Reference language tag")->required();
  divergence->add_option("--domain", o.domain, "Restrict to one domain tag");
  common(divergence);
  emit(divergence);

  auto* ent = analyze->add_subcommand("entropy", "Mean routing entropy per layer");
  traces(ent);
  ent->add_option("--domain", o.domain, "Restrict to one domain tag");
  common(ent);
  emit(ent);

  auto* cons = analyze->add_subcommand("consistency", "Intra-sequence Jaccard consistency");
  traces(cons);
  cons->add_option("--domain", o.domain, "Restrict to one domain tag");
  cons->add_option("--pairs", o.pairs, "Token pairs per sequence")->check(CLI::PositiveNumber);
  cons->add_option("--seed", o.seed, "Sampling seed");
  common(cons);
  emit(cons);

  auto* corr = analyze->add_subcommand("correlate", "Pearson r between divergence and per-language scores");
  corr->add_option("--divergence", o.divergence_csv, "divergence.csv")->required()->check(CLI::ExistingFile);
  corr->add_option("--scores", o.scores_csv, "CSV with language,score")->required()->check(CLI::ExistingFile);
  corr->add_option("--band", o.band, "Also correlate the mean over this layer range (lo:hi)");
  common(corr);

  auto* cdiv = analyze->add_subcommand("corpus-divergence", "Unpaired H-JS divergence between two slices");
  traces(cdiv);
  cdiv->add_option("--a", o.slice_a, "Slice selector lang[:domain]")->required();
  cdiv->add_option("--b", o.slice_b, "Slice selector lang[:domain]")->required();
  cdiv->add_option("--layers", o.layers, "Layer range lo:hi");
  common(cdiv);
  emit(cdiv);

  auto* experts = app.add_subcommand("experts", "Specialized expert identification");
  experts->require_subcommand(1);
  auto* identify = experts->add_subcommand("identify", "Experts with delta > tau between two slices");
  traces(identify);
  identify->add_option("--target", o.target, "Target slice lang[:domain]")->required();
  identify->add_option("--baseline", o.baseline, "Baseline slice lang[:domain]")->required();
  identify->add_option("--tau", o.tau, "Strict selection threshold")->required();
  identify->add_option("--layers", o.layers, "Layer range lo:hi");
  identify->add_option("--label", o.label, "Set label");
  identify->add_option("--delta-csv", o.delta_csv, "Write the delta profile as CSV");
  common(identify);
  emit(identify);

  auto* uni = experts->add_subcommand("union", "Multilingual experts: delta > tau for any language");
  traces(uni);
  uni->add_option("--baseline", o.baseline, "Baseline slice lang[:domain]")->required();
  uni->add_option("--languages", o.languages, "Languages (default: all except baseline)")->delimiter(',');
  uni->add_option("--tau", o.tau, "Strict selection threshold")->required();
  uni->add_option("--layers", o.layers, "Layer range lo:hi");
  uni->add_option("--label", o.label, "Set label");
  common(uni);

  auto* ovl = experts->add_subcommand("overlap", "Shared (layer, expert) members of two sets");
  ovl->add_option("--a", o.set_a, "Expert set JSON")->required()->check(CLI::ExistingFile);
  ovl->add_option("--b", o.set_b, "Expert set JSON")->required()->check(CLI::ExistingFile);
  common(ovl);

  auto* plan = app.add_subcommand("plan", "Build an intervention plan from an expert set");
  plan->add_option("--experts", o.experts_json, "Expert set JSON")->required()->check(CLI::ExistingFile);
  plan->add_option("--mode", o.mode, "soft|hard")->check(CLI::IsMember({"soft", "hard"}));
  plan->add_option("--direction", o.direction, "activate|deactivate")
      ->check(CLI::IsMember({"activate", "deactivate"}));
  plan->add_option("--lambda", o.lambda, "Soft strength in units of logit std");
  plan->add_option("--layers", o.layers, "Restrict to layer range lo:hi");
  plan->add_option("--seed", o.seed, "Perturbation rng seed");
  plan->add_option("--sigma", o.sigma, "Hard perturbation standard deviation");
  auto* model_opt = plan->add_option("--model", o.model, "Model preset (olmoe, phi, gpt-oss, qwen3)");
  auto* trace_opt = plan->add_option("--trace,-t", o.traces, "Take the model spec from a trace header")
                        ->check(CLI::ExistingFile);
  auto* nl = plan->add_option("--num-layers", o.num_layers, "Model depth");
  plan->add_option("--num-experts", o.num_experts, "Experts per layer")->needs(nl);
  plan->add_option("--top-k", o.top_k, "Experts per token")->needs(nl);
  model_opt->excludes(trace_opt)->excludes(nl);
  trace_opt->excludes(nl);
  common(plan);

  auto* validate = app.add_subcommand("validate", "Validate trace files and summarize them");
  traces(validate);
  common(validate);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  std::vector<std::string> command{"routelab"};
  command.insert(command.end(), args.begin(), args.end());
  Run run(command, o.out);
  try {
    int code = kExitOk;
    if (sim->parsed()) code = cmd_sim(o, run);
    else if (synth->parsed()) code = cmd_synth(o, run);
    else if (divergence->parsed()) code = cmd_divergence(o, run, err);
    else if (ent->parsed()) code = cmd_entropy(o, run);
    else if (cons->parsed()) code = cmd_consistency(o, run);
    else if (corr->parsed()) code = cmd_correlate(o, run);
    else if (cdiv->parsed()) code = cmd_corpus_divergence(o, run);
    else if (identify->parsed()) code = cmd_identify(o, run);
    else if (uni->parsed()) code = cmd_union(o, run);
    else if (ovl->parsed()) code = cmd_overlap(o, run);
    else if (plan->parsed()) code = cmd_plan(o, run, err);
    else if (validate->parsed()) code = cmd_validate(o, run, out);
    run.finish(o.manifest.empty() ? std::nullopt : std::optional<fs::path>(o.manifest));
    return code;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}

}  // namespace routelab
