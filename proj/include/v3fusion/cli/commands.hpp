#pragma once

// Pipeline stages behind the command-line tool. Every stage reads and writes
// files in one run directory, so each intermediate can be inspected and the
// stages can be driven from tests without spawning a process.
//
//   synth        -> log.jsonl, pool.manifest, truth.jsonl
//   analyze      -> split.json, failures.csv, similarity.csv, surface.csv, best_team.json [, ga_trace.csv]
//   train-fusion -> fusion_model.json
//   predict      -> predictions.csv
//   verify       -> uncertainty.csv, threshold.json
//   report       -> report_main.csv, report_phase_ablation.csv, report_metric_ablation.csv, report.json
//
// Each stage also writes run_manifest_<stage>.json (config hash, seed, digests).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "v3fusion/v3fusion.hpp"

namespace v3fusion::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kValidationFailure = 1, kUsageError = 2, kInternalError = 3 };

/// Bad flag combination or unusable argument.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// An upstream stage has not produced its artifact yet.
class MissingArtifact : public ValidationError {
 public:
  MissingArtifact(const fs::path& path, const std::string& producer)
      : ValidationError("missing " + path.filename().string() + " in " + path.parent_path().string() +
                        "; run `" + producer + "` first"),
        producer_(producer) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

// ---------------------------------------------------------------------------
// Files and digests.

inline std::string to_hex(const unsigned char* data, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xF]);
  }
  return out;
}

inline std::string sha256(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  return to_hex(md, len);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to '" + path.string() + "'");
}

inline fs::path require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) throw MissingArtifact(path, producer);
  return path;
}

/// Records what a stage consumed and produced. Only file names (not full
/// paths) go in, so identical runs in different directories match byte for byte.
class RunManifest {
 public:
  RunManifest(std::string command, json config, std::uint64_t seed)
      : command_(std::move(command)), config_(std::move(config)), seed_(seed) {}

  void input(const fs::path& path) { inputs_[path.filename().string()] = sha256(read_file(path)); }

  void write_output(const fs::path& path, std::string_view bytes) {
    write_file(path, bytes);
    outputs_[path.filename().string()] = sha256(bytes);
  }

  void finish(const fs::path& out_dir) const {
    json j{{"command", command_},
           {"config", config_},
           {"config_hash", sha256(config_.dump())},
           {"seed", seed_},
           {"inputs", inputs_},
           {"outputs", outputs_}};
    write_file(out_dir / ("run_manifest_" + command_ + ".json"), j.dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_;
  std::uint64_t seed_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

inline json load_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("'" + path.filename().string() + "' is not valid JSON: " + e.what());
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared inputs.

struct Inputs {
  std::string log;
  std::string manifest;
  std::string out = ".";
  std::uint64_t seed = 0;
};

struct LoadedPool {
  PoolManifest manifest;
  std::vector<EpisodeRecord> records;
};

inline LoadedPool load_pool(const Inputs& in, RunManifest* run) {
  if (in.log.empty()) throw UsageError("--log is required");
  if (in.manifest.empty()) throw UsageError("--manifest is required");
  LoadedPool pool;
  pool.manifest = load_manifest(in.manifest);
  pool.records = ingest_file(in.log, pool.manifest);
  if (pool.records.empty()) throw ValidationError("episode log '" + in.log + "' has no episodes");
  if (run) {
    run->input(in.manifest);
    run->input(in.log);
  }
  return pool;
}

inline fs::path out_dir(const Inputs& in) {
  fs::path dir(in.out);
  fs::create_directories(dir);
  return dir;
}

inline std::vector<std::string> member_ids(const PoolManifest& manifest, TeamMask mask) {
  std::vector<std::string> ids;
  for (auto i : team_members(mask)) ids.push_back(manifest.model_ids.at(i));
  return ids;
}

inline std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline DatasetSplit load_split(const fs::path& dir, RunManifest* run) {
  const auto path = require(dir / "split.json", "analyze");
  if (run) run->input(path);
  return split_from_json(load_json(path));
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  Inputs io;
  std::size_t models = 6;
  std::size_t episodes = 600;
  std::size_t choices = 4;
  std::string task = "mcq";
  std::vector<double> accuracies;
  std::vector<std::string> groups;  // "0+1+2:0.8"
  bool planted = false;
  double pattern_fraction = 0.3;
  std::size_t minority = 0;
  double noise = 0.5;
};

inline CorrelationGroup parse_group(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("group '" + text + "' must look like 0+1+2:0.8");
  CorrelationGroup g;
  std::istringstream members(text.substr(0, colon));
  std::string item;
  try {
    while (std::getline(members, item, '+')) g.members.push_back(std::stoul(item));
    g.strength = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("group '" + text + "' must look like 0+1+2:0.8");
  }
  return g;
}

inline int cmd_synth(const SynthOptions& opt, std::ostream& log) {
  SynthConfig cfg;
  cfg.num_models = opt.models;
  cfg.episodes = opt.episodes;
  cfg.num_choices = opt.choices;
  cfg.task_kind = parse_task_kind(opt.task);
  cfg.accuracies = opt.accuracies;
  for (const auto& g : opt.groups) cfg.groups.push_back(parse_group(g));
  cfg.planted.enabled = opt.planted;
  cfg.planted.pattern_fraction = opt.pattern_fraction;
  cfg.planted.minority_model = opt.minority;
  cfg.embedding.noise_scales.assign(opt.models, opt.noise);
  cfg.seed = derive_seed(opt.io.seed, "synth");

  json config{{"models", opt.models},     {"episodes", opt.episodes},
              {"choices", opt.choices},   {"task", std::string(to_string(cfg.task_kind))},
              {"accuracies", opt.accuracies}, {"groups", opt.groups},
              {"planted", opt.planted},   {"pattern_fraction", opt.pattern_fraction},
              {"minority", opt.minority}, {"noise", opt.noise}};
  RunManifest run("synth", config, opt.io.seed);
  const auto synth = generate(cfg);
  const auto dir = out_dir(opt.io);

  std::ostringstream manifest, records, truth;
  write_manifest(manifest, synth.manifest);
  serialize(records, synth.records, synth.manifest);
  write_truth_sidecar(truth, synth.truth);
  run.write_output(dir / "pool.manifest", manifest.str());
  run.write_output(dir / "log.jsonl", records.str());
  run.write_output(dir / "truth.jsonl", truth.str());
  run.finish(dir);
  log << "wrote " << synth.records.size() << " episodes for " << synth.manifest.size() << " models to "
      << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// validate

inline int cmd_validate(const Inputs& io, std::ostream& log) {
  if (io.log.empty() || io.manifest.empty()) throw UsageError("validate needs --log and --manifest");
  const auto manifest = load_manifest(io.manifest);
  std::ifstream in(io.log);
  if (!in) throw Error("cannot open episode log '" + io.log + "'");
  const auto result = ingest_collect(in, manifest);
  if (result.violations.empty()) {
    log << "OK, " << result.records.size() << " episodes, " << manifest.size() << " models\n";
    return kOk;
  }
  log << "FAILED, " << result.violations.size() << " violation(s) in " << result.lines_read << " episodes\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(10, result.violations.size()); ++i) {
    log << "  line " << result.violations[i].line << ": " << result.violations[i].message << "\n";
  }
  return kValidationFailure;
}

// ---------------------------------------------------------------------------
// analyze

enum class SearchMethod { Auto, BruteForce, Genetic };

struct AnalyzeOptions {
  Inputs io;
  std::string fitness_weights;  // empty = task default
  SearchMethod method = SearchMethod::Auto;
  std::string cka_scope = "negative";
  std::size_t min_episodes = 10;
  bool strict_cka = false;
  double oeq_threshold = 1.0;
  SplitRatios ratios;
  std::size_t ga_population = 64;
  std::size_t ga_stall = 100;
  std::size_t ga_max_generations = 2000;
  bool metric_ablation = true;
};

struct SearchOutcome {
  ScoredTeam best;
  std::vector<ScoredTeam> table;  // ascending mask
  std::vector<GenerationStats> trace;
};

inline SearchOutcome search(std::size_t n, const TeamScorer& scorer, SearchMethod method, const GaConfig& ga) {
  SearchOutcome out;
  const bool brute = method == SearchMethod::BruteForce || (method == SearchMethod::Auto && n <= 20);
  if (brute || n < 3) {
    auto bf = brute_force_prune(n, scorer);
    out.best = bf.best;
    out.table = std::move(bf.table);
    return out;
  }
  auto res = ga_prune(n, scorer, ga);
  out.best = res.best;
  out.trace = std::move(res.trace);
  for (auto& [mask, team] : res.evaluated) out.table.push_back(team);
  std::sort(out.table.begin(), out.table.end(), [](const ScoredTeam& a, const ScoredTeam& b) { return a.mask < b.mask; });
  return out;
}

inline json scores_json(const ScoredTeam& t) {
  json s = json::object();
  if (t.scores.focal_error) s["focal_error"] = *t.scores.focal_error;
  if (t.scores.focal_cka) s["focal_cka"] = *t.scores.focal_cka;
  if (t.scores.fleiss_kappa) s["fleiss_kappa"] = *t.scores.fleiss_kappa;
  if (t.scores.plurality_acc) s["plurality_acc"] = *t.scores.plurality_acc;
  return s;
}

inline int cmd_analyze(const AnalyzeOptions& opt, std::ostream& log) {
  const auto scope = parse_cka_scope(opt.cka_scope);
  json config{{"fitness_weights", opt.fitness_weights},
              {"method", opt.method == SearchMethod::Auto         ? "auto"
                         : opt.method == SearchMethod::BruteForce ? "brute_force"
                                                                  : "ga"},
              {"cka_scope", opt.cka_scope},
              {"min_episodes", opt.min_episodes},
              {"strict_cka", opt.strict_cka},
              {"oeq_threshold", opt.oeq_threshold},
              {"split", {opt.ratios.train, opt.ratios.validation, opt.ratios.test}},
              {"ga", {opt.ga_population, opt.ga_stall, opt.ga_max_generations}},
              {"metric_ablation", opt.metric_ablation}};
  RunManifest run("analyze", config, opt.io.seed);
  const auto pool = load_pool(opt.io, &run);
  const std::size_t n = pool.manifest.size();
  if (opt.method == SearchMethod::BruteForce && n > 20) {
    throw UsageError("pool of " + std::to_string(n) + " models exceeds the brute-force ceiling of 20; use --ga");
  }
  const auto dir = out_dir(opt.io);

  const auto parts = split(pool.records, opt.ratios, derive_seed(opt.io.seed, "split"));
  run.write_output(dir / "split.json", to_json(parts).dump(2) + "\n");
  const auto train_records = select(pool.records, parts.train);
  const auto analysis_records = select(pool.records, parts.validation);

  const auto flags = failure_flags(analysis_records, n, opt.oeq_threshold);
  {
    std::ostringstream csv;
    write_failure_csv(csv, flags, pool.manifest.model_ids);
    run.write_output(dir / "failures.csv", csv.str());
  }

  Warnings warnings;
  std::optional<FocalSimilarity> similarity;
  if (has_embeddings(analysis_records)) {
    const auto embeddings = extract_embeddings(analysis_records, n);
    CkaOptions cka_options{scope, opt.min_episodes, opt.strict_cka};
    similarity = focal_similarity(embeddings, flags, cka_options);
    warnings.insert(warnings.end(), similarity->warnings.begin(), similarity->warnings.end());
    std::ostringstream csv;
    write_similarity_csv(csv, cka_matrix(embeddings, {}, 2, "global"), pool.manifest.model_ids);
    run.write_output(dir / "similarity.csv", csv.str());
  } else {
    warnings.push_back("log carries no embeddings; focal_cka unavailable");
  }

  std::optional<VoteTable> votes;
  if (pool.manifest.task_kind == TaskKind::MCQ) votes = VoteTable::from_records(train_records);

  FitnessConfig fitness;
  if (!opt.fitness_weights.empty()) {
    fitness = FitnessConfig::parse(opt.fitness_weights);
  } else {
    fitness = pool.manifest.task_kind == TaskKind::MCQ ? FitnessConfig::mcq_default() : FitnessConfig::oeq_default();
  }
  FitnessInputs inputs{&flags, similarity ? &*similarity : nullptr, votes ? &*votes : nullptr};
  const TeamScorer scorer = [&](TeamMask mask) { return score_team(mask, inputs, fitness); };

  GaConfig ga;
  ga.population_size = opt.ga_population;
  ga.stall_generations = opt.ga_stall;
  ga.max_generations = opt.ga_max_generations;
  ga.seed = derive_seed(opt.io.seed, "ga");
  const auto outcome = search(n, scorer, opt.method, ga);

  {
    std::ostringstream csv;
    write_surface_csv(csv, outcome.table);
    run.write_output(dir / "surface.csv", csv.str());
  }
  if (!outcome.trace.empty()) {
    std::ostringstream csv;
    csv << "generation,best_mask,best_fitness,mean_fitness,evaluations\n";
    for (const auto& g : outcome.trace) {
      csv << g.generation << ',' << g.best_mask << ',' << fmt17(g.best_fitness) << ',' << fmt17(g.mean_fitness) << ','
          << g.evaluations << '\n';
    }
    run.write_output(dir / "ga_trace.csv", csv.str());
  }

  json weights = json::object();
  for (const auto& [c, w] : fitness.weights) weights[std::string(to_string(c))] = w;
  json best{{"mask", outcome.best.mask},
            {"members", member_ids(pool.manifest, outcome.best.mask)},
            {"fitness", outcome.best.fitness},
            {"scores", scores_json(outcome.best)},
            {"fitness_weights", weights},
            {"method", outcome.trace.empty() ? "brute_force" : "ga"},
            {"teams_scored", outcome.table.size()}};

  // Metric-swap ablation: each pairwise metric alone drives the search.
  json ablation = json::object();
  if (opt.metric_ablation) {
    for (auto metric : kAllPairwiseMetrics) {
      const double sign = higher_is_more_diverse(metric) ? 1.0 : -1.0;
      const TeamScorer metric_scorer = fitness_only(
          [&, metric, sign](TeamMask mask) { return sign * pairwise_metric(flags, mask, metric).value; });
      GaConfig metric_ga = ga;
      metric_ga.seed = derive_seed(opt.io.seed, "ga:" + std::string(to_string(metric)));
      const auto result = search(n, metric_scorer, opt.method, metric_ga);
      ablation[std::string(to_string(metric))] = {{"mask", result.best.mask},
                                                  {"members", member_ids(pool.manifest, result.best.mask)},
                                                  {"fitness", result.best.fitness}};
    }
  }
  best["metric_ablation"] = ablation;
  best["warnings"] = warnings;
  run.write_output(dir / "best_team.json", best.dump(2) + "\n");
  run.finish(dir);

  log << "best team: " << join(member_ids(pool.manifest, outcome.best.mask), ",") << " (fitness "
      << fmt17(outcome.best.fitness) << ", " << outcome.table.size() << " teams scored)\n";
  for (const auto& w : warnings) log << "warning: " << w << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train-fusion

struct TrainOptions {
  Inputs io;
  std::size_t epochs = 500;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::string optimizer = "adam";
  std::string activation = "relu";
  std::vector<std::size_t> hidden = {100, 100};
  std::optional<std::size_t> patience;
};

inline constexpr const char* kHeadsFormat = "v3fusion-heads/1";

/// Fusion heads to train: the selected team, the whole pool (fusion-only
/// ablation) and each metric-ablation team.
inline std::vector<std::pair<std::string, TeamMask>> head_plan(const json& best_team, std::size_t n) {
  std::vector<std::pair<std::string, TeamMask>> heads;
  heads.emplace_back("main", best_team.at("mask").get<TeamMask>());
  heads.emplace_back("full_pool", full_team(n));
  for (const auto& [metric, entry] : best_team.at("metric_ablation").items()) {
    heads.emplace_back("metric:" + metric, entry.at("mask").get<TeamMask>());
  }
  return heads;
}

inline int cmd_train_fusion(const TrainOptions& opt, std::ostream& log) {
  json config{{"epochs", opt.epochs},
              {"learning_rate", opt.learning_rate},
              {"batch_size", opt.batch_size},
              {"optimizer", opt.optimizer},
              {"activation", opt.activation},
              {"hidden", opt.hidden},
              {"patience", opt.patience ? json(*opt.patience) : json(nullptr)}};
  RunManifest run("train-fusion", config, opt.io.seed);
  const auto dir = out_dir(opt.io);
  const auto parts = load_split(dir, &run);
  const auto best_path = require(dir / "best_team.json", "analyze");
  run.input(best_path);
  const auto best_team = load_json(best_path);
  const auto pool = load_pool(opt.io, &run);
  if (pool.manifest.task_kind != TaskKind::MCQ) {
    throw ValidationError("fusion heads need MCQ choice probabilities; open-ended logs stop after analyze");
  }
  const std::size_t m_max = pool.manifest.num_choices_max;
  const auto train_records = select(pool.records, parts.train);
  const auto validation_records = select(pool.records, parts.validation);

  TrainConfig cfg;
  cfg.epochs = opt.epochs;
  cfg.learning_rate = opt.learning_rate;
  cfg.batch_size = opt.batch_size;
  cfg.optimizer = parse_optimizer(opt.optimizer);
  cfg.activation = parse_activation(opt.activation);
  cfg.hidden = opt.hidden;
  cfg.early_stop_patience = opt.patience;
  cfg.seed = derive_seed(opt.io.seed, "train");

  std::unordered_map<TeamMask, json> trained;
  json heads = json::array();
  for (const auto& [name, mask] : head_plan(best_team, pool.manifest.size())) {
    auto it = trained.find(mask);
    if (it == trained.end()) {
      const auto train_set = build_fusion_dataset(train_records, mask, m_max);
      const auto validation_set = build_fusion_dataset(validation_records, mask, m_max);
      const auto model = train(train_set, &validation_set, cfg, m_max, member_ids(pool.manifest, mask));
      log << "trained " << name << " head on " << std::popcount(mask) << " models: final train loss "
          << fmt17(model.metadata.train_loss.back()) << "\n";
      it = trained.emplace(mask, to_json(model)).first;
    }
    heads.push_back({{"name", name}, {"mask", mask}, {"checkpoint", it->second}});
  }
  run.write_output(dir / "fusion_model.json", json{{"format", kHeadsFormat}, {"heads", heads}}.dump() + "\n");
  run.finish(dir);
  return kOk;
}

struct Head {
  std::string name;
  TeamMask mask = 0;
  FusionModel model;
};

inline std::vector<Head> load_heads(const fs::path& dir, RunManifest* run) {
  const auto path = require(dir / "fusion_model.json", "train-fusion");
  if (run) run->input(path);
  const auto j = load_json(path);
  if (j.value("format", "") != kHeadsFormat) throw ValidationError("fusion_model.json has an unknown format tag");
  std::vector<Head> heads;
  for (const auto& h : j.at("heads")) {
    heads.push_back({h.at("name").get<std::string>(), h.at("mask").get<TeamMask>(),
                     fusion_model_from_json(h.at("checkpoint"))});
  }
  return heads;
}

// ---------------------------------------------------------------------------
// predict

inline int cmd_predict(const Inputs& io, std::ostream& log) {
  RunManifest run("predict", json::object(), io.seed);
  const auto dir = out_dir(io);
  const auto heads = load_heads(dir, &run);  // the nearest missing stage is the one worth naming
  const auto parts = load_split(dir, &run);
  const auto pool = load_pool(io, &run);
  const std::size_t m_max = pool.manifest.num_choices_max;

  std::ostringstream csv;
  csv << "split,episode_id,head,choice";
  for (std::size_t c = 0; c < m_max; ++c) csv << ",p" << c;
  csv << '\n';
  const std::pair<const char*, const std::vector<std::string>*> splits[] = {{"validation", &parts.validation},
                                                                             {"test", &parts.test}};
  for (const auto& [split_name, ids] : splits) {
    const auto records = select(pool.records, *ids);
    for (const auto& head : heads) {
      std::vector<FusionPrediction> preds(records.size());
      parallel_for(records.size(), [&](std::size_t k) { preds[k] = predict(head.model, records[k], head.mask); });
      for (std::size_t k = 0; k < records.size(); ++k) {
        csv << split_name << ',' << records[k].episode_id << ',' << head.name << ',' << preds[k].choice;
        for (Eigen::Index c = 0; c < preds[k].distribution.size(); ++c) csv << ',' << fmt17(preds[k].distribution[c]);
        csv << '\n';
      }
    }
  }
  run.write_output(dir / "predictions.csv", csv.str());
  run.finish(dir);
  log << "wrote predictions for " << heads.size() << " heads on " << parts.validation.size() << " validation and "
      << parts.test.size() << " test episodes\n";
  return kOk;
}

struct StoredPrediction {
  std::size_t choice = 0;
  std::vector<double> distribution;
};

/// (split, head) -> episode_id -> prediction.
using PredictionTable = std::map<std::pair<std::string, std::string>, std::unordered_map<std::string, StoredPrediction>>;

inline PredictionTable load_predictions(const fs::path& dir, RunManifest* run) {
  const auto path = require(dir / "predictions.csv", "predict");
  if (run) run->input(path);
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  PredictionTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < 5) throw ParseError(line_no, "predictions.csv row has too few columns");
    StoredPrediction p;
    try {
      p.choice = std::stoul(cells[3]);
      for (std::size_t c = 4; c < cells.size(); ++c) p.distribution.push_back(std::stod(cells[c]));
    } catch (const std::exception&) {
      throw ParseError(line_no, "predictions.csv has a non-numeric cell");
    }
    table[{cells[0], cells[2]}][cells[1]] = std::move(p);
  }
  return table;
}

inline const StoredPrediction& lookup(const PredictionTable& table, const std::string& split_name,
                                      const std::string& head, const std::string& episode) {
  const auto t = table.find({split_name, head});
  if (t == table.end()) throw ValidationError("predictions.csv has no " + split_name + " rows for head " + head);
  const auto p = t->second.find(episode);
  if (p == t->second.end()) throw ValidationError("predictions.csv lacks episode " + episode + " for head " + head);
  return p->second;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyOptions {
  Inputs io;
  std::string mode = "mixture";
  double alpha = 10.0;
};

inline std::vector<std::vector<double>> member_distributions(const EpisodeRecord& record, TeamMask team) {
  std::vector<std::vector<double>> dists;
  for (auto i : team_members(team)) dists.push_back(record.outputs.at(i).choice_probs);
  return dists;
}

/// Fused distribution restricted to the episode's real choices and renormalized.
inline std::vector<double> fused_over_choices(const StoredPrediction& p, std::size_t num_choices) {
  std::vector<double> d(p.distribution.begin(), p.distribution.begin() + static_cast<std::ptrdiff_t>(num_choices));
  double sum = 0.0;
  for (double v : d) sum += v;
  for (double& v : d) v /= sum;
  return d;
}

inline int cmd_verify(const VerifyOptions& opt, std::ostream& log) {
  const auto mode = parse_uncertainty_mode(opt.mode);
  RunManifest run("verify", json{{"mode", opt.mode}, {"alpha", opt.alpha}}, opt.io.seed);
  const auto dir = out_dir(opt.io);
  const auto predictions = load_predictions(dir, &run);
  const auto parts = load_split(dir, &run);
  const auto best_path = require(dir / "best_team.json", "analyze");
  run.input(best_path);
  const TeamMask team = load_json(best_path).at("mask").get<TeamMask>();
  const auto pool = load_pool(opt.io, &run);

  auto uncertainties = [&](const char* split_name, const std::vector<EpisodeRecord>& records) {
    std::vector<UncertaintyRecord> out(records.size());
    parallel_for(records.size(), [&](std::size_t k) {
      const auto& p = lookup(predictions, split_name, "main", records[k].episode_id);
      const auto fused = fused_over_choices(p, records[k].num_choices);
      out[k] = decompose(member_distributions(records[k], team), fused, mode);
      out[k].episode_id = records[k].episode_id;
    });
    return out;
  };

  const auto validation_records = select(pool.records, parts.validation);
  const auto test_records = select(pool.records, parts.test);
  const auto calibration = uncertainties("validation", validation_records);
  std::vector<double> epistemic;
  for (const auto& u : calibration) epistemic.push_back(u.epistemic);
  ThresholdOptions options;
  options.alpha = opt.alpha;
  const auto fit = fit_threshold(epistemic, options);

  const auto scored = uncertainties("test", test_records);
  std::vector<std::vector<std::vector<double>>> members;
  std::vector<std::size_t> fused_choices;
  for (const auto& r : test_records) {
    members.push_back(member_distributions(r, team));
    fused_choices.push_back(lookup(predictions, "test", "main", r.episode_id).choice);
  }
  const auto verdicts = verify_and_rectify(scored, fit.tau, members, fused_choices);

  std::ostringstream csv;
  write_uncertainty_csv(csv, scored, verdicts);
  run.write_output(dir / "uncertainty.csv", csv.str());
  auto fit_json = to_json(fit);
  fit_json["mode"] = opt.mode;
  fit_json["calibration_episodes"] = epistemic.size();
  run.write_output(dir / "threshold.json", fit_json.dump(2) + "\n");
  run.finish(dir);

  const auto rejected = std::count_if(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return !v.accepted; });
  log << "threshold " << fmt17(fit.tau) << " (" << to_string(fit.branch) << "); rejected " << rejected << " of "
      << verdicts.size() << " test episodes\n";
  for (const auto& w : fit.warnings) log << "warning: " << w << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// report

inline std::vector<std::size_t> load_verdict_choices(const fs::path& path, const std::vector<std::string>& ids) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  std::unordered_map<std::string, std::size_t> choice;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 7) throw ParseError(line_no, "uncertainty.csv row needs 7 columns");
    try {
      choice[cells[0]] = std::stoul(cells[6]);
    } catch (const std::exception&) {
      throw ParseError(line_no, "uncertainty.csv has a non-numeric final_choice");
    }
  }
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    const auto it = choice.find(id);
    if (it == choice.end()) throw ValidationError("uncertainty.csv lacks test episode " + id);
    out.push_back(it->second);
  }
  return out;
}

inline int cmd_report(const Inputs& io, std::ostream& log) {
  RunManifest run("report", json::object(), io.seed);
  const auto dir = out_dir(io);
  if (load_manifest(io.manifest).task_kind == TaskKind::MCQ) require(dir / "uncertainty.csv", "verify");
  const auto parts = load_split(dir, &run);
  const auto best_path = require(dir / "best_team.json", "analyze");
  run.input(best_path);
  const auto best_team = load_json(best_path);
  const TeamMask team = best_team.at("mask").get<TeamMask>();
  const auto pool = load_pool(io, &run);
  const auto test = select(pool.records, parts.test);
  const std::size_t n = pool.manifest.size();

  ReportInputs inputs;
  const std::string team_note = join(member_ids(pool.manifest, team), "+");

  if (pool.manifest.task_kind == TaskKind::OEQ) {
    inputs.metric_names = {"bleu1", "exact_match", "token_f1"};
    for (std::size_t i = 0; i < n; ++i) {
      TextScores sum;
      for (const auto& r : test) {
        const auto& answer = r.outputs[i].answer_text;
        const auto s = text_metrics(answer ? *answer : std::string(), r.label_text);
        sum.bleu1 += s.bleu1;
        sum.exact_match += s.exact_match;
        sum.token_f1 += s.token_f1;
      }
      const double scale = 100.0 / static_cast<double>(test.size());
      inputs.systems.push_back({pool.manifest.model_ids[i], "base",
                                {{"bleu1", scale * sum.bleu1},
                                 {"exact_match", scale * sum.exact_match},
                                 {"token_f1", scale * sum.token_f1}},
                                ""});
    }
  } else {
    const auto predictions = load_predictions(dir, &run);
    const auto uncertainty_path = require(dir / "uncertainty.csv", "verify");
    run.input(uncertainty_path);
    inputs.metric_names = {"accuracy"};
    std::vector<std::size_t> labels;
    for (const auto& r : test) labels.push_back(r.label_choice);
    auto acc = [&](const std::vector<std::size_t>& preds) { return std::map<std::string, double>{{"accuracy", accuracy(preds, labels)}}; };
    auto plurality = [&](TeamMask mask) {
      std::vector<std::size_t> preds;
      for (const auto& r : test) preds.push_back(plurality_vote(member_distributions(r, mask)));
      return preds;
    };
    auto fused = [&](const std::string& head) {
      std::vector<std::size_t> preds;
      for (const auto& r : test) preds.push_back(lookup(predictions, "test", head, r.episode_id).choice);
      return preds;
    };
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> preds;
      for (const auto& r : test) preds.push_back(argmax(r.outputs[i].choice_probs));
      inputs.systems.push_back({pool.manifest.model_ids[i], "base", acc(preds), ""});
    }
    const auto rectified = load_verdict_choices(uncertainty_path, parts.test);
    inputs.systems.push_back({"plurality_all", "baseline", acc(plurality(full_team(n))), "all models"});
    inputs.systems.push_back({"v3fusion", "fusion", acc(fused("main")), team_note});
    inputs.systems.push_back({"v3fusion_rectify", "fusion", acc(rectified), team_note});
    inputs.systems.push_back({"pruning_only", "ablation:phase", acc(plurality(team)), team_note});
    inputs.systems.push_back({"fusion_only", "ablation:phase", acc(fused("full_pool")), "all models"});
    inputs.systems.push_back({"full", "ablation:phase", acc(rectified), team_note});
    inputs.systems.push_back({"focal_fitness", "ablation:metric", acc(fused("main")), team_note});
    for (const auto& [metric, entry] : best_team.at("metric_ablation").items()) {
      const auto mask = entry.at("mask").get<TeamMask>();
      inputs.systems.push_back(
          {metric, "ablation:metric", acc(fused("metric:" + metric)), join(member_ids(pool.manifest, mask), "+")});
    }
    inputs.required = {"v3fusion", "v3fusion_rectify", "pruning_only", "fusion_only", "full"};
  }

  const auto report = build_report(inputs);
  auto table = [&](const char* file, const std::vector<ReportRow>& rows) {
    std::ostringstream csv;
    write_report_csv(csv, rows, report.metric_names);
    run.write_output(dir / file, csv.str());
  };
  table("report_main.csv", report.main_table);
  table("report_phase_ablation.csv", report.phase_ablation);
  table("report_metric_ablation.csv", report.metric_ablation);
  run.write_output(dir / "report.json", to_json(report).dump(2) + "\n");
  run.finish(dir);

  for (const auto& row : report.main_table) {
    log << row.system.name;
    for (const auto& m : report.metric_names) log << "  " << m << " " << detail::fixed2(row.system.metrics.at(m));
    log << "\n";
  }
  return kOk;
}

}  // namespace v3fusion::cli
