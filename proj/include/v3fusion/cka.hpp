#pragma once

// Linear CKA between embedding spaces and the Focal-CKA ensemble score.

#include <algorithm>
#include <cstdio>
#include <optional>
#include <bit>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "v3fusion/common.hpp"
#include "v3fusion/error_diversity.hpp"
#include "v3fusion/records.hpp"

namespace v3fusion {

/// K x d_i episode embeddings of one model (rows = episodes).
using EmbeddingMatrix = Eigen::MatrixXd;

/// K x K linear-kernel Gram matrix X X^T.
inline Eigen::MatrixXd gram(const EmbeddingMatrix& x) {
  if (x.rows() < 2) throw ValidationError("gram needs at least 2 rows");
  return x * x.transpose();
}

/// H K H with H = I - (1/n) 1 1^T.
inline Eigen::MatrixXd center(const Eigen::MatrixXd& k) {
  const Eigen::VectorXd row_mean = k.rowwise().mean();
  const Eigen::RowVectorXd col_mean = k.colwise().mean();
  const double grand = k.mean();
  Eigen::MatrixXd c = k;
  c.colwise() -= row_mean;
  c.rowwise() -= col_mean;
  c.array() += grand;
  return c;
}

/// vec(HKH) . vec(HLH) / (n - 1).
inline double hsic(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l) {
  if (k.rows() != k.cols() || l.rows() != l.cols()) throw ValidationError("hsic needs square matrices");
  if (k.rows() != l.rows()) throw ValidationError("hsic size mismatch");
  if (k.rows() < 2) throw ValidationError("hsic needs n >= 2");
  return center(k).cwiseProduct(center(l)).sum() / static_cast<double>(k.rows() - 1);
}

namespace detail {

/// Self-HSIC below this means the embedding is constant across episodes.
inline constexpr double kDegenerateHsic = 1e-15;

inline double cka_from_centered(const Eigen::MatrixXd& kc, double k_self, const Eigen::MatrixXd& lc,
                                double l_self, double scale) {
  const double cross = kc.cwiseProduct(lc).sum() / scale;
  return std::clamp(cross / std::sqrt(k_self * l_self), 0.0, 1.0);
}

}  // namespace detail

/// HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)), clamped to [0, 1].
inline double cka(const EmbeddingMatrix& x, const EmbeddingMatrix& y) {
  if (x.rows() != y.rows()) throw ValidationError("cka needs the same episodes in both embeddings");
  const Eigen::MatrixXd kc = center(gram(x));
  const Eigen::MatrixXd lc = center(gram(y));
  const double scale = static_cast<double>(x.rows() - 1);
  const double k_self = kc.squaredNorm() / scale;
  const double l_self = lc.squaredNorm() / scale;
  if (k_self <= detail::kDegenerateHsic || l_self <= detail::kDegenerateHsic) {
    throw NumericalError("degenerate embedding");
  }
  return detail::cka_from_centered(kc, k_self, lc, l_self, scale);
}

/// Per-model embedding matrices aligned with a record list.
struct EmbeddingSet {
  std::vector<EmbeddingMatrix> per_model;

  std::size_t models() const { return per_model.size(); }
  std::size_t episodes() const { return per_model.empty() ? 0 : per_model.front().rows(); }

  /// Rows restricted to `rows`.
  EmbeddingSet subset(std::span<const std::size_t> rows) const {
    EmbeddingSet out;
    for (const auto& m : per_model) {
      EmbeddingMatrix sub(static_cast<Eigen::Index>(rows.size()), m.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
      out.per_model.push_back(std::move(sub));
    }
    return out;
  }
};

/// Collects embeddings from records; throws if any model lacks them.
inline EmbeddingSet extract_embeddings(const std::vector<EpisodeRecord>& records, std::size_t num_models) {
  EmbeddingSet set;
  if (records.empty()) throw ValidationError("no records to extract embeddings from");
  for (std::size_t i = 0; i < num_models; ++i) {
    const std::size_t dim = records.front().outputs.at(i).embedding.size();
    if (dim == 0) throw ValidationError("model " + std::to_string(i) + " has no embeddings");
    EmbeddingMatrix m(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < records.size(); ++k) {
      const auto& e = records[k].outputs.at(i).embedding;
      if (e.size() != dim) throw ValidationError("ragged embeddings for model " + std::to_string(i));
      m.row(static_cast<Eigen::Index>(k)) = Eigen::Map<const Eigen::RowVectorXd>(e.data(), static_cast<Eigen::Index>(dim));
    }
    set.per_model.push_back(std::move(m));
  }
  return set;
}

/// True when every record carries a non-empty embedding for every model.
inline bool has_embeddings(const std::vector<EpisodeRecord>& records) {
  if (records.empty()) return false;
  for (const auto& out : records.front().outputs) {
    if (out.embedding.empty()) return false;
  }
  return true;
}

enum class CkaScope { Negative, Global };

inline CkaScope parse_cka_scope(std::string_view text) {
  if (text == "negative") return CkaScope::Negative;
  if (text == "global") return CkaScope::Global;
  throw ValidationError("unknown cka scope '" + std::string(text) + "'");
}

struct CkaOptions {
  CkaScope scope = CkaScope::Negative;
  std::size_t min_episodes = 10;
  bool strict = false;  // error instead of falling back to global scope
};

struct SimilarityMatrix {
  Eigen::MatrixXd values;
  std::string episode_scope;
};

/// Pairwise CKA on exactly the given episode rows (all rows if empty); diagonal forced to 1.
inline SimilarityMatrix cka_matrix(const EmbeddingSet& embeddings, std::span<const std::size_t> rows,
                                   std::size_t min_episodes = 10, std::string scope_name = "subset") {
  const std::size_t n = embeddings.models();
  const std::size_t count = rows.empty() ? embeddings.episodes() : rows.size();
  if (count < min_episodes || count < 2) {
    throw ValidationError("cka_matrix: " + std::to_string(count) + " episodes is below the minimum of " +
                          std::to_string(min_episodes));
  }
  const EmbeddingSet scoped = rows.empty() ? embeddings : embeddings.subset(rows);
  const double scale = static_cast<double>(count - 1);
  std::vector<Eigen::MatrixXd> centered(n);
  std::vector<double> self(n);
  parallel_for(n, [&](std::size_t i) {
    centered[i] = center(gram(scoped.per_model[i]));
    self[i] = centered[i].squaredNorm() / scale;
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (self[i] <= detail::kDegenerateHsic) throw NumericalError("degenerate embedding");
  }
  SimilarityMatrix out{Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)),
                       std::move(scope_name)};
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) cells.emplace_back(i, j);
  }
  std::vector<double> values(cells.size());
  parallel_for(cells.size(), [&](std::size_t c) {
    const auto [i, j] = cells[c];
    values[c] = detail::cka_from_centered(centered[i], self[i], centered[j], self[j], scale);
  });
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto [i, j] = cells[c];
    out.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[c];
    out.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = values[c];
  }
  return out;
}

/// CKA between model `focal` and every model on the given rows; entry `focal` is 1.
inline Eigen::RowVectorXd similarity_row(const EmbeddingSet& embeddings, std::span<const std::size_t> rows,
                                         std::size_t focal) {
  const std::size_t n = embeddings.models();
  const EmbeddingSet scoped = embeddings.subset(rows);
  const double scale = static_cast<double>(rows.size() - 1);
  std::vector<Eigen::MatrixXd> centered(n);
  std::vector<double> self(n);
  parallel_for(n, [&](std::size_t j) {
    centered[j] = center(gram(scoped.per_model[j]));
    self[j] = centered[j].squaredNorm() / scale;
  });
  for (std::size_t j = 0; j < n; ++j) {
    if (self[j] <= detail::kDegenerateHsic) throw NumericalError("degenerate embedding");
  }
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    row(static_cast<Eigen::Index>(j)) =
        j == focal ? 1.0 : detail::cka_from_centered(centered[focal], self[focal], centered[j], self[j], scale);
  }
  return row;
}

/// Row i holds the similarities seen from focal model i: CKA computed on
/// model i's negative episodes (or on all episodes in global scope, or as a
/// fallback when model i has fewer than min_episodes failures).
struct FocalSimilarity {
  Eigen::MatrixXd rows;
  std::vector<bool> fell_back;
  Warnings warnings;
};

inline FocalSimilarity focal_similarity(const EmbeddingSet& embeddings, const FailureMatrix& flags,
                                        const CkaOptions& options = {},
                                        TeamMask focal_models = ~TeamMask{0}) {
  const std::size_t n = embeddings.models();
  if (flags.models() != n) throw ValidationError("failure matrix and embeddings disagree on pool size");
  if (flags.episodes() != embeddings.episodes()) {
    throw ValidationError("failure matrix and embeddings disagree on episode count");
  }
  FocalSimilarity out{Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)),
                      std::vector<bool>(n, false), {}};
  std::optional<SimilarityMatrix> global;
  auto global_matrix = [&]() -> const SimilarityMatrix& {
    if (!global) global = cka_matrix(embeddings, {}, options.min_episodes, "global");
    return *global;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!((focal_models >> i) & 1U)) continue;
    const auto& negatives = flags.failures_of(i);
    const auto row = static_cast<Eigen::Index>(i);
    if (options.scope == CkaScope::Global) {
      out.rows.row(row) = global_matrix().values.row(row);
      continue;
    }
    if (negatives.size() < options.min_episodes) {
      const std::string msg = "model " + std::to_string(i) + " has " + std::to_string(negatives.size()) +
                              " negative episodes (< " + std::to_string(options.min_episodes) + ")";
      if (options.strict) throw ValidationError("focal_cka: " + msg);
      out.warnings.push_back(msg + "; using global-scope CKA");
      out.fell_back[i] = true;
      out.rows.row(row) = global_matrix().values.row(row);
      continue;
    }
    out.rows.row(row) = similarity_row(embeddings, negatives, i);
  }
  return out;
}

struct FocalCkaScore {
  double value = 0.0;
  std::vector<std::pair<std::size_t, double>> per_focal;  // (model index, kappa)
  Warnings warnings;
};

/// lambda = 1 - mean_i kappa_i, kappa_i = mean_{j != i} s_ij from focal i's row.
inline FocalCkaScore focal_cka(TeamMask team, const FocalSimilarity& similarity) {
  const auto members = team_members(team);
  if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members");
  FocalCkaScore score;
  double total = 0.0;
  for (auto i : members) {
    double kappa = 0.0;
    for (auto j : members) {
      if (j != i) kappa += similarity.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    kappa /= static_cast<double>(members.size() - 1);
    score.per_focal.emplace_back(i, kappa);
    total += kappa;
    if (similarity.fell_back.at(i)) {
      score.warnings.push_back("focal model " + std::to_string(i) + " scored with global-scope CKA");
    }
  }
  score.value = 1.0 - total / static_cast<double>(members.size());
  return score;
}

inline FocalCkaScore focal_cka(TeamMask team, const EmbeddingSet& embeddings, const FailureMatrix& flags,
                               const CkaOptions& options = {}) {
  if (std::popcount(team) < 2) throw ValidationError("ensemble needs at least 2 members");
  return focal_cka(team, focal_similarity(embeddings, flags, options, team));
}

/// Square CSV with model ids as header row and first column.
inline void write_similarity_csv(std::ostream& out, const SimilarityMatrix& s,
                                 const std::vector<std::string>& model_ids) {
  out << "model";
  for (const auto& id : model_ids) out << ',' << id;
  out << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < s.values.rows(); ++i) {
    out << model_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < s.values.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.10f", s.values(i, j));
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace v3fusion
