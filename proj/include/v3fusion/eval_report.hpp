#pragma once

// Task metrics, voting baselines and the comparison/ablation report tables.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "v3fusion/common.hpp"
#include "v3fusion/text.hpp"

namespace v3fusion {

/// 100 * correct / total.
inline double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) throw ValidationError("predictions and labels are not aligned");
  if (predictions.empty()) throw ValidationError("accuracy of an empty prediction list");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
}

struct TextScores {
  double bleu1 = 0.0;
  double exact_match = 0.0;
  double token_f1 = 0.0;
};

/// Lowercase, strip punctuation, collapse whitespace; articles kept.
inline std::string surface_form(std::string_view raw) {
  std::string cleaned;
  for (unsigned char c : raw) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::string out;
  std::istringstream in(cleaned);
  std::string token;
  while (in >> token) {
    if (!out.empty()) out.push_back(' ');
    out += token;
  }
  return out;
}

/// Sentence BLEU-1 with brevity penalty, exact match, and multiset token F1.
/// BLEU-1 and F1 run on fully normalized tokens (articles dropped); exact
/// match compares surface forms, so a dropped or added article is a miss.
inline TextScores text_metrics(const std::string& prediction, const std::string& reference) {
  const auto ref = text::normalized_tokens(reference);
  if (ref.empty()) throw ValidationError("empty reference answer");
  const auto pred = text::normalized_tokens(prediction);
  TextScores out;
  if (pred.empty()) return out;
  out.exact_match = surface_form(prediction) == surface_form(reference) ? 1.0 : 0.0;
  std::map<std::string, int> ref_counts;
  for (const auto& t : ref) ++ref_counts[t];
  std::map<std::string, int> pred_counts;
  for (const auto& t : pred) ++pred_counts[t];
  double common = 0.0;
  for (const auto& [token, count] : pred_counts) {
    const auto it = ref_counts.find(token);
    if (it != ref_counts.end()) common += std::min(count, it->second);
  }
  const double pred_len = static_cast<double>(pred.size());
  const double ref_len = static_cast<double>(ref.size());
  const double precision = common / pred_len;
  const double recall = common / ref_len;
  out.bleu1 = precision * std::exp(std::min(0.0, 1.0 - ref_len / pred_len));
  out.token_f1 = common > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return out;
}

/// Each member votes its argmax; most votes wins, ties to the lowest index.
inline std::size_t plurality_vote(const std::vector<std::vector<double>>& member_dists) {
  if (member_dists.empty()) throw ValidationError("plurality vote needs at least one member");
  std::vector<std::size_t> tally(member_dists.front().size(), 0);
  for (const auto& d : member_dists) {
    const auto vote = argmax(d);
    if (vote >= tally.size()) tally.resize(vote + 1, 0);
    ++tally[vote];
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < tally.size(); ++c) {
    if (tally[c] > tally[best]) best = c;
  }
  return best;
}

/// 100 * (system - best_base) / best_base.
inline double relative_gain(double system, double best_base) {
  if (!(best_base > 0.0)) throw ValidationError("relative gain needs a positive baseline");
  return 100.0 * (system - best_base) / best_base;
}

// ---------------------------------------------------------------------------
// Report assembly.

/// Per-system metric values on the evaluation split, in percent.
struct SystemResult {
  std::string name;
  std::string kind;  // "base", "baseline", "fusion", "ablation:phase", "ablation:metric"
  std::map<std::string, double> metrics;
  std::string note;  // e.g. the team a pruning ablation selected
};

struct ReportRow {
  SystemResult system;
  std::map<std::string, double> gains;  // vs best base model, per metric
};

struct MetricReport {
  std::vector<std::string> metric_names;
  std::map<std::string, std::pair<std::string, double>> best_base;  // metric -> (model, value)
  std::vector<ReportRow> main_table;
  std::vector<ReportRow> phase_ablation;
  std::vector<ReportRow> metric_ablation;
};

struct ReportInputs {
  std::vector<std::string> metric_names;  // {"accuracy"} or {"bleu1","exact_match","token_f1"}
  std::vector<SystemResult> systems;
  std::vector<std::string> required;  // names that must be present among `systems`
};

inline MetricReport build_report(const ReportInputs& in) {
  if (in.metric_names.empty()) throw ValidationError("report needs at least one metric");
  std::vector<std::string> missing;
  for (const auto& name : in.required) {
    const bool found = std::any_of(in.systems.begin(), in.systems.end(),
                                   [&](const SystemResult& s) { return s.name == name; });
    if (!found) missing.push_back(name);
  }
  if (!missing.empty()) {
    std::string msg = "report is missing systems:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }
  MetricReport report;
  report.metric_names = in.metric_names;
  for (const auto& metric : in.metric_names) {
    bool have = false;
    for (const auto& s : in.systems) {
      if (s.kind != "base") continue;
      const auto it = s.metrics.find(metric);
      if (it == s.metrics.end()) throw ValidationError("base system " + s.name + " lacks metric " + metric);
      if (!have || it->second > report.best_base[metric].second) {
        report.best_base[metric] = {s.name, it->second};
        have = true;
      }
    }
    if (!have) throw ValidationError("report needs at least one base model");
  }
  for (const auto& s : in.systems) {
    ReportRow row{s, {}};
    for (const auto& metric : in.metric_names) {
      const auto it = s.metrics.find(metric);
      if (it == s.metrics.end()) throw ValidationError("system " + s.name + " lacks metric " + metric);
      row.gains[metric] = relative_gain(it->second, report.best_base[metric].second);
    }
    if (s.kind == "ablation:phase") {
      report.phase_ablation.push_back(std::move(row));
    } else if (s.kind == "ablation:metric") {
      report.metric_ablation.push_back(std::move(row));
    } else {
      report.main_table.push_back(std::move(row));
    }
  }
  return report;
}

namespace detail {

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string signed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%+.2f", v);
  return buf;
}

}  // namespace detail

/// CSV with one column per metric and one "<metric>_gain_pct" column per metric.
inline void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows,
                             const std::vector<std::string>& metric_names) {
  out << "system,kind";
  for (const auto& m : metric_names) out << ',' << m;
  for (const auto& m : metric_names) out << ',' << m << "_gain_pct";
  out << ",note\n";
  for (const auto& row : rows) {
    out << row.system.name << ',' << row.system.kind;
    for (const auto& m : metric_names) out << ',' << detail::fixed2(row.system.metrics.at(m));
    for (const auto& m : metric_names) out << ',' << detail::signed2(row.gains.at(m));
    out << ',' << row.system.note << '\n';
  }
}

inline nlohmann::json to_json(const MetricReport& report) {
  auto rows_json = [&](const std::vector<ReportRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& row : rows) {
      nlohmann::json metrics = nlohmann::json::object();
      nlohmann::json gains = nlohmann::json::object();
      for (const auto& m : report.metric_names) {
        metrics[m] = std::round(row.system.metrics.at(m) * 1e4) / 1e4;
        gains[m] = std::round(row.gains.at(m) * 100.0) / 100.0;
      }
      arr.push_back({{"system", row.system.name},
                     {"kind", row.system.kind},
                     {"metrics", metrics},
                     {"relative_gain_pct", gains},
                     {"note", row.system.note}});
    }
    return arr;
  };
  nlohmann::json best = nlohmann::json::object();
  for (const auto& [metric, entry] : report.best_base) {
    best[metric] = {{"model", entry.first}, {"value", std::round(entry.second * 1e4) / 1e4}};
  }
  return {{"metrics", report.metric_names},
          {"best_base", best},
          {"main", rows_json(report.main_table)},
          {"phase_ablation", rows_json(report.phase_ablation)},
          {"metric_ablation", rows_json(report.metric_ablation)}};
}

}  // namespace v3fusion
