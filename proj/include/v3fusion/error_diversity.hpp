#pragma once

// Failure matrix, focal negative correlation / focal diversity, and the
// pairwise error-correlation metrics used as pruning alternatives.

#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "v3fusion/common.hpp"
#include "v3fusion/records.hpp"
#include "v3fusion/text.hpp"

namespace v3fusion {

/// Binary K x N matrix; cell (k, i) is 1 iff model i failed episode k.
class FailureMatrix {
 public:
  FailureMatrix() = default;

  FailureMatrix(std::vector<std::string> episode_ids, std::size_t num_models)
      : episode_ids_(std::move(episode_ids)),
        num_models_(num_models),
        row_masks_(episode_ids_.size(), 0),
        failures_(num_models) {
    if (num_models > kMaxPoolSize) throw Error("pool larger than 64 models");
  }

  std::size_t episodes() const { return episode_ids_.size(); }
  std::size_t models() const { return num_models_; }
  const std::vector<std::string>& episode_ids() const { return episode_ids_; }

  bool failed(std::size_t episode, std::size_t model) const {
    return (row_masks_[episode] >> model) & 1U;
  }

  void set_failed(std::size_t episode, std::size_t model) {
    if (failed(episode, model)) return;
    row_masks_[episode] |= TeamMask{1} << model;
    auto& list = failures_[model];
    list.insert(std::upper_bound(list.begin(), list.end(), episode), episode);
  }

  /// Mask of the models that failed episode k.
  TeamMask row_mask(std::size_t episode) const { return row_masks_[episode]; }

  /// Ascending indices of the episodes where `model` failed (its negative episodes).
  const std::vector<std::size_t>& failures_of(std::size_t model) const { return failures_[model]; }

  /// Column mean: empirical failure rate of one model.
  double failure_rate(std::size_t model) const {
    return episodes() == 0 ? 0.0
                           : static_cast<double>(failures_[model].size()) /
                                 static_cast<double>(episodes());
  }

  /// Rows restricted to `rows`, preserving their order.
  FailureMatrix subset(std::span<const std::size_t> rows) const {
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    for (auto r : rows) ids.push_back(episode_ids_.at(r));
    FailureMatrix out(std::move(ids), num_models_);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (std::size_t i = 0; i < num_models_; ++i) {
        if (failed(rows[k], i)) out.set_failed(k, i);
      }
    }
    return out;
  }

 private:
  std::vector<std::string> episode_ids_;
  std::size_t num_models_ = 0;
  std::vector<TeamMask> row_masks_;
  std::vector<std::vector<std::size_t>> failures_;
};

/// Fraction of distinct normalized label unigrams that appear in the prediction.
inline double unigram_recall(const std::string& reference, const std::string& prediction) {
  const auto ref_tokens = text::normalized_tokens(reference);
  const auto pred_tokens = text::normalized_tokens(prediction);
  const std::set<std::string> ref(ref_tokens.begin(), ref_tokens.end());
  const std::set<std::string> pred(pred_tokens.begin(), pred_tokens.end());
  if (ref.empty()) return 1.0;
  std::size_t hit = 0;
  for (const auto& t : ref) hit += pred.count(t);
  return static_cast<double>(hit) / static_cast<double>(ref.size());
}

/// MCQ: failure iff argmax(choice_probs) != label. OEQ: failure iff unigram recall < threshold.
inline FailureMatrix failure_flags(const std::vector<EpisodeRecord>& records, std::size_t num_models,
                                   double oeq_recall_threshold = 1.0) {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.episode_id);
  FailureMatrix flags(std::move(ids), num_models);
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& record = records[k];
    if (record.outputs.size() != num_models) throw ValidationError("record/pool size mismatch");
    for (std::size_t i = 0; i < num_models; ++i) {
      const auto& out = record.outputs[i];
      bool failed = false;
      if (record.task_kind == TaskKind::MCQ) {
        failed = argmax(out.choice_probs) != record.label_choice;
      } else {
        failed = unigram_recall(record.label_text, out.answer_text.value_or("")) < oeq_recall_threshold;
      }
      if (failed) flags.set_failed(k, i);
    }
  }
  return flags;
}

/// p_j = (#episodes where exactly j of the S members fail) / K, j = 1..S.
/// `rows` limits the episodes considered (empty span = all rows).
inline std::vector<double> joint_failure_probs(const FailureMatrix& flags, TeamMask team,
                                               std::span<const std::size_t> rows = {}) {
  const int team_size = std::popcount(team);
  if (team_size < 2) throw ValidationError("ensemble needs at least 2 members");
  std::vector<double> counts(static_cast<std::size_t>(team_size), 0.0);
  const std::size_t total = rows.empty() ? flags.episodes() : rows.size();
  if (total == 0) throw ValidationError("no episodes to count failures over");
  auto tally = [&](std::size_t k) {
    const int j = std::popcount(flags.row_mask(k) & team);
    if (j > 0) counts[static_cast<std::size_t>(j - 1)] += 1.0;
  };
  if (rows.empty()) {
    for (std::size_t k = 0; k < flags.episodes(); ++k) tally(k);
  } else {
    for (auto k : rows) tally(k);
  }
  for (double& c : counts) c /= static_cast<double>(total);
  return counts;
}

struct NegativeCorrelation {
  double rho = 1.0;  // clamped to [0, 1]
  double raw = 1.0;
  double p_one = 0.0;  // P(1): one random member fails
  double p_two = 0.0;  // P(2): two distinct random members both fail
};

/// rho = 1 - P(2)/P(1) with P(1) = sum_j (j/S) p_j and P(2) = sum_j j(j-1)/(S(S-1)) p_j.
/// P(1) = 0 (nobody ever fails) is defined as rho = 1.
inline NegativeCorrelation focal_negative_correlation(std::span<const double> p, std::size_t team_size) {
  if (team_size < 2) throw ValidationError("focal negative correlation needs S >= 2");
  if (p.size() != team_size) throw ValidationError("p must have one entry per team size 1..S");
  const double s = static_cast<double>(team_size);
  NegativeCorrelation out;
  for (std::size_t idx = 0; idx < p.size(); ++idx) {
    if (p[idx] < 0.0) throw ValidationError("negative joint-failure probability");
    const double j = static_cast<double>(idx + 1);
    out.p_one += j / s * p[idx];
    out.p_two += j * (j - 1.0) / (s * (s - 1.0)) * p[idx];
  }
  if (out.p_one <= 0.0) return out;
  out.raw = 1.0 - out.p_two / out.p_one;
  out.rho = std::clamp(out.raw, 0.0, 1.0);
  return out;
}

struct FocalDiversityScore {
  double value = 0.0;
  std::vector<std::pair<std::size_t, double>> per_focal;  // (model index, rho)
  Warnings warnings;
};

/// lambda = mean over members of rho computed on that member's failure episodes.
inline FocalDiversityScore focal_diversity(const FailureMatrix& flags, TeamMask team) {
  const auto members = team_members(team);
  if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members");
  FocalDiversityScore score;
  const std::size_t s = members.size();
  std::vector<double> counts(s);
  double total = 0.0;
  for (auto focal : members) {
    const auto& negatives = flags.failures_of(focal);
    double rho = 1.0;
    if (negatives.empty()) {
      score.warnings.push_back("model " + std::to_string(focal) +
                               " never fails; its focal negative correlation defaults to 1");
    } else {
      std::fill(counts.begin(), counts.end(), 0.0);
      for (auto k : negatives) {
        counts[static_cast<std::size_t>(std::popcount(flags.row_mask(k) & team) - 1)] += 1.0;
      }
      for (double& c : counts) c /= static_cast<double>(negatives.size());
      const auto corr = focal_negative_correlation(counts, s);
      if (!(corr.p_one > 0.0)) throw NumericalError("focal subset with P(1) = 0");
      rho = corr.rho;
    }
    score.per_focal.emplace_back(focal, rho);
    total += rho;
  }
  score.value = total / static_cast<double>(s);
  return score;
}

// ---------------------------------------------------------------------------
// Pairwise / non-focal error-correlation metrics.

enum class PairwiseMetric {
  FleissKappa,
  CorrelationCoefficient,
  BinaryDisagreement,
  CohenKappaMean,
  BinaryEntropy,
};

inline constexpr PairwiseMetric kAllPairwiseMetrics[] = {
    PairwiseMetric::FleissKappa, PairwiseMetric::CorrelationCoefficient,
    PairwiseMetric::BinaryDisagreement, PairwiseMetric::CohenKappaMean,
    PairwiseMetric::BinaryEntropy};

inline std::string_view to_string(PairwiseMetric metric) {
  switch (metric) {
    case PairwiseMetric::FleissKappa: return "fleiss_kappa";
    case PairwiseMetric::CorrelationCoefficient: return "correlation_coefficient";
    case PairwiseMetric::BinaryDisagreement: return "binary_disagreement";
    case PairwiseMetric::CohenKappaMean: return "cohen_kappa_mean";
    case PairwiseMetric::BinaryEntropy: return "binary_entropy";
  }
  return "?";
}

inline PairwiseMetric parse_pairwise_metric(std::string_view name) {
  for (auto m : kAllPairwiseMetrics) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown pairwise metric '" + std::string(name) + "'");
}

/// True when a larger value of the metric means a more diverse team.
inline bool higher_is_more_diverse(PairwiseMetric metric) {
  return metric == PairwiseMetric::BinaryDisagreement || metric == PairwiseMetric::BinaryEntropy;
}

struct MetricValue {
  double value = 0.0;
  Warnings warnings;
};

namespace detail {

struct PairCounts {
  double both_fail = 0, a_only = 0, b_only = 0, both_ok = 0;
};

inline PairCounts pair_counts(const FailureMatrix& flags, std::size_t a, std::size_t b) {
  PairCounts c;
  for (std::size_t k = 0; k < flags.episodes(); ++k) {
    const bool fa = flags.failed(k, a);
    const bool fb = flags.failed(k, b);
    if (fa && fb) c.both_fail += 1;
    else if (fa) c.a_only += 1;
    else if (fb) c.b_only += 1;
    else c.both_ok += 1;
  }
  return c;
}

}  // namespace detail

/// Fleiss' kappa over S raters with categories {correct, failed}.
inline MetricValue fleiss_kappa(const FailureMatrix& flags, TeamMask team) {
  const auto members = team_members(team);
  const double s = static_cast<double>(members.size());
  if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members");
  if (flags.episodes() == 0) throw ValidationError("no episodes");
  MetricValue out;
  double agreement = 0.0;
  double fail_votes = 0.0;
  for (std::size_t k = 0; k < flags.episodes(); ++k) {
    const double f = std::popcount(flags.row_mask(k) & team);
    const double ok = s - f;
    agreement += (f * (f - 1.0) + ok * (ok - 1.0)) / (s * (s - 1.0));
    fail_votes += f;
  }
  const double k_count = static_cast<double>(flags.episodes());
  const double p_bar = agreement / k_count;
  const double p_fail = fail_votes / (k_count * s);
  const double p_e = p_fail * p_fail + (1.0 - p_fail) * (1.0 - p_fail);
  if (1.0 - p_e <= 1e-15) {
    out.warnings.push_back("fleiss_kappa: every vote in one category; kappa set to 1");
    out.value = 1.0;
    return out;
  }
  out.value = (p_bar - p_e) / (1.0 - p_e);
  return out;
}

inline MetricValue pairwise_metric(const FailureMatrix& flags, TeamMask team, PairwiseMetric metric) {
  const auto members = team_members(team);
  if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members");
  if (flags.episodes() == 0) throw ValidationError("no episodes");
  if (metric == PairwiseMetric::FleissKappa) return fleiss_kappa(flags, team);

  MetricValue out;
  const double k_count = static_cast<double>(flags.episodes());
  if (metric == PairwiseMetric::BinaryEntropy) {
    const double s = static_cast<double>(members.size());
    double total = 0.0;
    for (std::size_t k = 0; k < flags.episodes(); ++k) {
      const double q = std::popcount(flags.row_mask(k) & team) / s;
      if (q > 0.0 && q < 1.0) total -= q * std::log2(q) + (1.0 - q) * std::log2(1.0 - q);
    }
    out.value = total / k_count;
    return out;
  }

  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t x = 0; x < members.size(); ++x) {
    for (std::size_t y = x + 1; y < members.size(); ++y, ++pairs) {
      const auto c = detail::pair_counts(flags, members[x], members[y]);
      const double pa = (c.both_fail + c.a_only) / k_count;  // failure rate of a
      const double pb = (c.both_fail + c.b_only) / k_count;
      const std::string pair_name =
          std::to_string(members[x]) + "/" + std::to_string(members[y]);
      switch (metric) {
        case PairwiseMetric::BinaryDisagreement:
          total += (c.a_only + c.b_only) / k_count;
          break;
        case PairwiseMetric::CorrelationCoefficient: {
          const double var = pa * (1.0 - pa) * pb * (1.0 - pb);
          if (var <= 0.0) {
            out.warnings.push_back("correlation: zero-variance column in pair " + pair_name);
            break;
          }
          total += (c.both_fail / k_count - pa * pb) / std::sqrt(var);
          break;
        }
        case PairwiseMetric::CohenKappaMean: {
          const double observed = (c.both_fail + c.both_ok) / k_count;
          const double expected = pa * pb + (1.0 - pa) * (1.0 - pb);
          if (1.0 - expected <= 1e-15) {
            out.warnings.push_back("cohen_kappa: zero-variance column in pair " + pair_name);
            break;
          }
          total += (observed - expected) / (1.0 - expected);
          break;
        }
        default:
          break;
      }
    }
  }
  out.value = total / static_cast<double>(pairs);
  return out;
}

/// CSV: header "episode_id,<model ids...>", one 0/1 row per episode.
inline void write_failure_csv(std::ostream& out, const FailureMatrix& flags,
                              const std::vector<std::string>& model_ids) {
  out << "episode_id";
  for (const auto& id : model_ids) out << ',' << id;
  out << '\n';
  for (std::size_t k = 0; k < flags.episodes(); ++k) {
    out << flags.episode_ids()[k];
    for (std::size_t i = 0; i < flags.models(); ++i) out << ',' << (flags.failed(k, i) ? 1 : 0);
    out << '\n';
  }
}

}  // namespace v3fusion
