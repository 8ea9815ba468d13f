#pragma once

// Episode data model, episode-log ingestion/serialization, manifests and splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "v3fusion/common.hpp"

namespace v3fusion {

/// Tolerance on sum(choice_probs) accepted at ingestion.
inline constexpr double kProbSumTolerance = 1e-6;
/// Widest deviation renormalize_probs will repair.
inline constexpr double kProbRepairTolerance = 1e-3;

struct ModelOutput {
  std::vector<double> choice_probs;  // MCQ only
  std::optional<std::string> answer_text;
  std::vector<double> embedding;  // mean-pooled visual embedding, may be empty

  bool operator==(const ModelOutput&) const = default;
};

/// One (question, image) episode. `outputs` is indexed in manifest order.
struct EpisodeRecord {
  std::string episode_id;
  TaskKind task_kind = TaskKind::MCQ;
  std::size_t num_choices = 0;  // 0 for OEQ
  std::size_t label_choice = 0;  // MCQ
  std::string label_text;  // OEQ reference answer
  std::vector<ModelOutput> outputs;

  bool operator==(const EpisodeRecord&) const = default;
};

struct PoolManifest {
  std::vector<std::string> model_ids;
  TaskKind task_kind = TaskKind::MCQ;
  std::size_t num_choices_max = 0;

  std::size_t size() const { return model_ids.size(); }

  std::size_t index_of(const std::string& model_id) const {
    const auto it = std::find(model_ids.begin(), model_ids.end(), model_id);
    if (it == model_ids.end()) throw ValidationError("unknown model_id '" + model_id + "'");
    return static_cast<std::size_t>(it - model_ids.begin());
  }

  void validate() const {
    if (model_ids.size() < 2) throw ValidationError("manifest needs at least 2 models");
    std::unordered_set<std::string> seen;
    for (const auto& id : model_ids) {
      if (id.empty()) throw ValidationError("manifest has an empty model_id");
      if (!seen.insert(id).second) throw ValidationError("duplicate model_id '" + id + "'");
    }
    if (task_kind == TaskKind::MCQ && num_choices_max < 2) {
      throw ValidationError("MCQ manifest needs m_max >= 2");
    }
  }
};

// ---------------------------------------------------------------------------
// Manifest: "key = value" lines, '#' comments.
//
//   model_ids = llava13b, llava7b, qwen7b
//   task_kind = MCQ
//   m_max = 4

inline PoolManifest parse_manifest(std::istream& in) {
  PoolManifest manifest;
  bool have_ids = false;
  bool have_kind = false;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return std::string{};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "model_ids") {
      std::stringstream ss(value);
      std::string id;
      while (std::getline(ss, id, ',')) manifest.model_ids.push_back(trim(id));
      have_ids = true;
    } else if (key == "task_kind") {
      manifest.task_kind = parse_task_kind(value);
      have_kind = true;
    } else if (key == "m_max" || key == "num_choices_max") {
      try {
        manifest.num_choices_max = std::stoul(value);
      } catch (const std::exception&) {
        throw ParseError(line_no, "m_max is not an integer");
      }
    } else {
      throw ParseError(line_no, "unknown manifest key '" + key + "'");
    }
  }
  if (!have_ids) throw ValidationError("manifest is missing model_ids");
  if (!have_kind) throw ValidationError("manifest is missing task_kind");
  manifest.validate();
  return manifest;
}

inline PoolManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path + "'");
  return parse_manifest(in);
}

inline void write_manifest(std::ostream& out, const PoolManifest& manifest) {
  out << "model_ids = ";
  for (std::size_t i = 0; i < manifest.model_ids.size(); ++i) {
    out << (i ? ", " : "") << manifest.model_ids[i];
  }
  out << "\ntask_kind = " << to_string(manifest.task_kind) << "\n";
  if (manifest.task_kind == TaskKind::MCQ) out << "m_max = " << manifest.num_choices_max << "\n";
}

// ---------------------------------------------------------------------------

/// Divides by the sum; refuses sums outside 1 +/- 1e-3.
inline std::vector<double> renormalize_probs(std::vector<double> probs) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ValidationError("negative or non-finite probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kProbRepairTolerance) {
    throw ValidationError("probability sum " + std::to_string(sum) + " outside repair band");
  }
  for (double& p : probs) p /= sum;
  return probs;
}

// ---------------------------------------------------------------------------
// Episode log (JSON lines).

inline nlohmann::json to_json(const EpisodeRecord& record, const PoolManifest& manifest) {
  nlohmann::json j;
  j["episode_id"] = record.episode_id;
  j["task_kind"] = std::string(to_string(record.task_kind));
  if (record.task_kind == TaskKind::MCQ) {
    j["num_choices"] = record.num_choices;
    j["label"] = record.label_choice;
  } else {
    j["num_choices"] = nullptr;
    j["label"] = record.label_text;
  }
  nlohmann::json models = nlohmann::json::object();
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& out = record.outputs.at(i);
    nlohmann::json m = nlohmann::json::object();
    if (record.task_kind == TaskKind::MCQ) m["choice_probs"] = out.choice_probs;
    if (out.answer_text) m["answer_text"] = *out.answer_text;
    if (!out.embedding.empty()) m["embedding"] = out.embedding;
    models[manifest.model_ids[i]] = std::move(m);
  }
  j["models"] = std::move(models);
  return j;
}

inline void serialize(std::ostream& out, const std::vector<EpisodeRecord>& records,
                      const PoolManifest& manifest) {
  for (const auto& record : records) out << to_json(record, manifest).dump() << '\n';
}

namespace detail {

inline std::vector<double> read_reals(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw ValidationError(std::string(what) + " must be an array");
  std::vector<double> values;
  values.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw ValidationError(std::string(what) + " has a non-numeric entry");
    values.push_back(v.get<double>());
  }
  return values;
}

}  // namespace detail

/// Builds one record from a parsed log object and checks every per-episode invariant.
inline EpisodeRecord parse_episode(const nlohmann::json& j, const PoolManifest& manifest) {
  if (!j.is_object()) throw ValidationError("episode is not an object");
  EpisodeRecord record;
  try {
    record.episode_id = j.at("episode_id").get<std::string>();
    record.task_kind = parse_task_kind(j.at("task_kind").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("missing or mistyped episode_id/task_kind: ") + e.what());
  }
  const std::string& id = record.episode_id;
  if (id.empty()) throw ValidationError("empty episode_id");
  if (record.task_kind != manifest.task_kind) {
    throw ValidationError("episode " + id + ": task_kind differs from manifest");
  }
  if (!j.contains("label")) throw ValidationError("episode " + id + ": missing label");
  const auto& label = j.at("label");
  if (record.task_kind == TaskKind::MCQ) {
    if (!j.contains("num_choices") || !j.at("num_choices").is_number_unsigned()) {
      throw ValidationError("episode " + id + ": MCQ needs an integer num_choices");
    }
    record.num_choices = j.at("num_choices").get<std::size_t>();
    if (record.num_choices < 2) throw ValidationError("episode " + id + ": num_choices < 2");
    if (record.num_choices > manifest.num_choices_max) {
      throw ValidationError("episode " + id + ": num_choices exceeds m_max");
    }
    if (!label.is_number_unsigned() || label.get<std::size_t>() >= record.num_choices) {
      throw ValidationError("episode " + id + ": label index out of range");
    }
    record.label_choice = label.get<std::size_t>();
  } else {
    if (!label.is_string() || label.get<std::string>().empty()) {
      throw ValidationError("episode " + id + ": OEQ label must be a non-empty string");
    }
    record.label_text = label.get<std::string>();
  }
  if (!j.contains("models") || !j.at("models").is_object()) {
    throw ValidationError("episode " + id + ": missing models map");
  }
  const auto& models = j.at("models");
  for (const auto& [model_id, _] : models.items()) {
    if (std::find(manifest.model_ids.begin(), manifest.model_ids.end(), model_id) ==
        manifest.model_ids.end()) {
      throw ValidationError("episode " + id + ": model " + model_id + " not in manifest");
    }
  }
  record.outputs.resize(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const std::string& model_id = manifest.model_ids[i];
    if (!models.contains(model_id)) {
      throw ValidationError("episode " + id + ": missing model " + model_id);
    }
    const auto& m = models.at(model_id);
    auto& out = record.outputs[i];
    const std::string where = "episode " + id + ", model " + model_id;
    if (record.task_kind == TaskKind::MCQ) {
      if (!m.contains("choice_probs")) throw ValidationError(where + ": missing choice_probs");
      out.choice_probs = detail::read_reals(m.at("choice_probs"), "choice_probs");
      if (out.choice_probs.size() != record.num_choices) {
        throw ValidationError(where + ": choice_probs length differs from num_choices");
      }
      double sum = 0.0;
      for (double p : out.choice_probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw ValidationError(where + ": negative probability");
        sum += p;
      }
      if (std::abs(sum - 1.0) > kProbSumTolerance) {
        std::ostringstream msg;
        msg << where << ": choice_probs sum to " << sum;
        throw ValidationError(msg.str());
      }
    }
    if (m.contains("answer_text")) {
      if (!m.at("answer_text").is_string()) throw ValidationError(where + ": answer_text not a string");
      out.answer_text = m.at("answer_text").get<std::string>();
    } else if (record.task_kind == TaskKind::OEQ) {
      throw ValidationError(where + ": OEQ output needs answer_text");
    }
    if (m.contains("embedding")) out.embedding = detail::read_reals(m.at("embedding"), "embedding");
  }
  return record;
}

struct Violation {
  std::size_t line = 0;
  std::string message;
};

struct IngestResult {
  std::vector<EpisodeRecord> records;
  std::vector<Violation> violations;
  std::size_t lines_read = 0;
};

/// Checks invariants that span episodes: unique ids and a fixed embedding width per model.
inline void check_corpus(const std::vector<EpisodeRecord>& records, const PoolManifest& manifest,
                         std::vector<Violation>* violations, const std::vector<std::size_t>& lines) {
  std::unordered_set<std::string> ids;
  std::vector<std::optional<std::size_t>> dims(manifest.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& record = records[r];
    const std::size_t line = lines.empty() ? r + 1 : lines[r];
    auto report = [&](std::string msg) {
      if (violations) {
        violations->push_back({line, std::move(msg)});
      } else {
        throw ParseError(line, msg);
      }
    };
    if (!ids.insert(record.episode_id).second) {
      report("duplicate episode_id " + record.episode_id);
    }
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const std::size_t d = record.outputs[i].embedding.size();
      if (!dims[i]) {
        dims[i] = d;
      } else if (*dims[i] != d) {
        report("episode " + record.episode_id + ", model " + manifest.model_ids[i] +
               ": embedding dimension " + std::to_string(d) + " differs from " +
               std::to_string(*dims[i]));
      }
    }
  }
}

/// Reads every line, collecting violations instead of stopping at the first one.
inline IngestResult ingest_collect(std::istream& in, const PoolManifest& manifest) {
  IngestResult result;
  std::vector<std::size_t> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++result.lines_read;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      result.violations.push_back({line_no, std::string("parse error: ") + e.what()});
      continue;
    }
    try {
      result.records.push_back(parse_episode(j, manifest));
      lines.push_back(line_no);
    } catch (const ValidationError& e) {
      result.violations.push_back({line_no, e.what()});
    }
  }
  check_corpus(result.records, manifest, &result.violations, lines);
  std::stable_sort(result.violations.begin(), result.violations.end(),
                   [](const Violation& a, const Violation& b) { return a.line < b.line; });
  return result;
}

/// Strict ingestion: throws ParseError (bad line) or ValidationError (invariant) on the first problem.
inline std::vector<EpisodeRecord> ingest(std::istream& in, const PoolManifest& manifest) {
  std::vector<EpisodeRecord> records;
  std::vector<std::size_t> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed episode: ") + e.what());
    }
    records.push_back(parse_episode(j, manifest));
    lines.push_back(line_no);
  }
  check_corpus(records, manifest, nullptr, lines);
  return records;
}

inline std::vector<EpisodeRecord> ingest_file(const std::string& path, const PoolManifest& manifest) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open episode log '" + path + "'");
  return ingest(in, manifest);
}

// ---------------------------------------------------------------------------
// Embedding sidecar: bulk little-endian binary storage, row order = episode order.
//
//   "V3EMB001" | u32 n_models | per model: u32 dim | u64 rows | rows x (sum dims) f64

inline constexpr char kEmbeddingMagic[8] = {'V', '3', 'E', 'M', 'B', '0', '0', '1'};

inline void write_embedding_sidecar(std::ostream& out, const std::vector<EpisodeRecord>& records,
                                    const PoolManifest& manifest) {
  auto put = [&out](const auto& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(value));
  };
  out.write(kEmbeddingMagic, sizeof(kEmbeddingMagic));
  put(static_cast<std::uint32_t>(manifest.size()));
  std::vector<std::uint32_t> dims(manifest.size(), 0);
  if (!records.empty()) {
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      dims[i] = static_cast<std::uint32_t>(records.front().outputs[i].embedding.size());
    }
  }
  for (auto d : dims) put(d);
  put(static_cast<std::uint64_t>(records.size()));
  for (const auto& record : records) {
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const auto& e = record.outputs[i].embedding;
      if (e.size() != dims[i]) throw ValidationError("ragged embedding in " + record.episode_id);
      out.write(reinterpret_cast<const char*>(e.data()),
                static_cast<std::streamsize>(e.size() * sizeof(double)));
    }
  }
}

/// Fills record embeddings from a sidecar; rows must match records one-to-one.
inline void attach_embedding_sidecar(std::istream& in, std::vector<EpisodeRecord>& records,
                                     const PoolManifest& manifest) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kEmbeddingMagic, sizeof(magic)) != 0) {
    throw ValidationError("embedding sidecar has a bad header");
  }
  auto get = [&in](auto& value) {
    in.read(reinterpret_cast<char*>(&value), sizeof(value));
    if (!in) throw ValidationError("embedding sidecar is truncated");
  };
  std::uint32_t n_models = 0;
  get(n_models);
  if (n_models != manifest.size()) throw ValidationError("embedding sidecar model count mismatch");
  std::vector<std::uint32_t> dims(n_models);
  for (auto& d : dims) get(d);
  std::uint64_t rows = 0;
  get(rows);
  if (rows != records.size()) throw ValidationError("embedding sidecar row count mismatch");
  for (auto& record : records) {
    for (std::size_t i = 0; i < n_models; ++i) {
      record.outputs[i].embedding.resize(dims[i]);
      in.read(reinterpret_cast<char*>(record.outputs[i].embedding.data()),
              static_cast<std::streamsize>(dims[i] * sizeof(double)));
      if (!in) throw ValidationError("embedding sidecar is truncated");
    }
  }
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitRatios {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  bool operator==(const DatasetSplit&) const = default;
};

/// Deterministic shuffled partition. Sizes use largest-remainder rounding.
inline DatasetSplit split(const std::vector<EpisodeRecord>& records, SplitRatios ratios,
                          std::uint64_t seed) {
  const double parts[3] = {ratios.train, ratios.validation, ratios.test};
  for (double r : parts) {
    if (!(r >= 0.0)) throw ValidationError("split ratios must be nonnegative");
  }
  if (std::abs(parts[0] + parts[1] + parts[2] - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  if (records.size() < 3) throw ValidationError("need at least 3 records to split");
  const std::size_t n = records.size();
  std::size_t counts[3];
  double fractions[3];
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = parts[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    fractions[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  while (assigned < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k) {
      if (fractions[k] > fractions[best] + 1e-12) best = k;
    }
    ++counts[best];
    fractions[best] = -1.0;
    ++assigned;
  }
  for (int k = 0; k < 3; ++k) {
    if (parts[k] > 0.0 && counts[k] == 0) {
      throw ValidationError("split ratio " + std::to_string(parts[k]) +
                            " leaves an empty partition for " + std::to_string(n) + " records");
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  DatasetSplit result;
  std::vector<std::string>* targets[3] = {&result.train, &result.validation, &result.test};
  std::size_t pos = 0;
  for (int k = 0; k < 3; ++k) {
    for (std::size_t c = 0; c < counts[k]; ++c) targets[k]->push_back(records[order[pos++]].episode_id);
  }
  return result;
}

inline nlohmann::json to_json(const DatasetSplit& s) {
  return nlohmann::json{{"train", s.train}, {"validation", s.validation}, {"test", s.test}};
}

inline DatasetSplit split_from_json(const nlohmann::json& j) {
  DatasetSplit s;
  try {
    s.train = j.at("train").get<std::vector<std::string>>();
    s.validation = j.at("validation").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad split file: ") + e.what());
  }
  std::unordered_set<std::string> seen;
  for (const auto* part : {&s.train, &s.validation, &s.test}) {
    for (const auto& id : *part) {
      if (!seen.insert(id).second) throw ValidationError("split partitions overlap at " + id);
    }
  }
  return s;
}

/// Records whose ids appear in `ids`, in the order of `ids`.
inline std::vector<EpisodeRecord> select(const std::vector<EpisodeRecord>& records,
                                         const std::vector<std::string>& ids) {
  std::unordered_map<std::string, std::size_t> index;
  index.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].episode_id, i);
  std::vector<EpisodeRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw ValidationError("split references unknown episode " + id);
    out.push_back(records[it->second]);
  }
  return out;
}

}  // namespace v3fusion
