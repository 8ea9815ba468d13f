#pragma once

// Total/aleatoric/epistemic decomposition, the adaptive rejection threshold
// (single Gaussian vs two-component GMM), and verify/rectify.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "v3fusion/common.hpp"

namespace v3fusion {

enum class UncertaintyMode { Mixture, Fusion };

inline std::string_view to_string(UncertaintyMode m) { return m == UncertaintyMode::Mixture ? "mixture" : "fusion"; }

inline UncertaintyMode parse_uncertainty_mode(std::string_view text) {
  if (text == "mixture") return UncertaintyMode::Mixture;
  if (text == "fusion") return UncertaintyMode::Fusion;
  throw ValidationError("unknown uncertainty mode '" + std::string(text) + "'");
}

/// Shannon entropy in nats; 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

struct UncertaintyRecord {
  std::string episode_id;
  double total = 0.0;
  double aleatoric = 0.0;
  double epistemic = 0.0;
  UncertaintyMode mode = UncertaintyMode::Mixture;
};

/// aleatoric = mean member entropy; total = entropy of the member mean
/// (mixture) or of the fused distribution (fusion); epistemic = total - aleatoric.
inline UncertaintyRecord decompose(const std::vector<std::vector<double>>& member_dists,
                                   std::span<const double> fused_dist, UncertaintyMode mode) {
  if (member_dists.empty()) throw ValidationError("decompose needs at least one member");
  const std::size_t m = member_dists.front().size();
  for (const auto& d : member_dists) {
    if (d.size() != m) throw ValidationError("member distributions differ in length");
  }
  UncertaintyRecord out;
  out.mode = mode;
  std::vector<double> mean(m, 0.0);
  for (const auto& d : member_dists) {
    out.aleatoric += entropy(d);
    for (std::size_t c = 0; c < m; ++c) mean[c] += d[c];
  }
  const double count = static_cast<double>(member_dists.size());
  out.aleatoric /= count;
  for (double& v : mean) v /= count;
  if (mode == UncertaintyMode::Mixture) {
    out.total = entropy(mean);
  } else {
    if (fused_dist.size() != m) throw ValidationError("fused distribution length differs from members");
    out.total = entropy(fused_dist);
  }
  out.epistemic = out.total - out.aleatoric;
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive threshold.

enum class ThresholdBranch { SingleGaussian, Gmm2 };

inline std::string_view to_string(ThresholdBranch b) {
  return b == ThresholdBranch::SingleGaussian ? "single_gaussian" : "gmm2";
}

struct GaussianFit {
  double mu = 0.0;
  double sigma = 0.0;
};

struct GmmFit {
  double pi = 0.5;  // weight of component 1
  GaussianFit first;
  GaussianFit second;
  std::vector<double> log_likelihood_trace;  // initial value, then one per EM iteration
  std::size_t iterations = 0;
  bool collapsed = false;
};

struct ThresholdFit {
  ThresholdBranch branch = ThresholdBranch::SingleGaussian;
  GaussianFit single;
  GmmFit gmm;
  double log_likelihood_single = 0.0;
  double log_likelihood_gmm = 0.0;
  double alpha = 10.0;
  double tau = 0.0;
  Warnings warnings;
};

struct ThresholdOptions {
  double alpha = 10.0;
  std::size_t min_values = 20;
  std::size_t max_iterations = 200;
  double tolerance = 1e-6;
  double collapse_sigma = 1e-8;
};

namespace detail {

inline double log_normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double log_add(double a, double b) {
  const double hi = std::max(a, b);
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

/// Maximum-likelihood moments (divisor n).
inline GaussianFit moments(std::span<const double> values) {
  GaussianFit fit;
  for (double v : values) fit.mu += v;
  fit.mu /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - fit.mu) * (v - fit.mu);
  fit.sigma = std::sqrt(var / static_cast<double>(values.size()));
  return fit;
}

inline double gmm_log_likelihood(std::span<const double> values, const GmmFit& g) {
  double ll = 0.0;
  for (double v : values) {
    ll += log_add(std::log(g.pi) + log_normal_pdf(v, g.first.mu, g.first.sigma),
                  std::log(1.0 - g.pi) + log_normal_pdf(v, g.second.mu, g.second.sigma));
  }
  return ll;
}

/// Posterior probability of component 1 for each value.
inline std::vector<double> responsibilities(std::span<const double> values, const GmmFit& g) {
  std::vector<double> r(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double a = std::log(g.pi) + log_normal_pdf(values[i], g.first.mu, g.first.sigma);
    const double b = std::log(1.0 - g.pi) + log_normal_pdf(values[i], g.second.mu, g.second.sigma);
    r[i] = std::exp(a - log_add(a, b));
  }
  return r;
}

}  // namespace detail

/// Two-component 1-D GMM by EM. Initialization splits the sorted sample at
/// the median and moment-matches each half, with pi = 0.5.
inline GmmFit fit_gmm2(std::span<const double> values, const ThresholdOptions& options = {}) {
  if (values.size() < 4) throw ValidationError("GMM fit needs at least 4 values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t half = sorted.size() / 2;
  GmmFit g;
  g.first = detail::moments(std::span<const double>(sorted.data(), half));
  g.second = detail::moments(std::span<const double>(sorted.data() + half, sorted.size() - half));
  if (g.first.sigma < options.collapse_sigma || g.second.sigma < options.collapse_sigma) {
    g.collapsed = true;
    return g;
  }
  double ll = detail::gmm_log_likelihood(values, g);
  g.log_likelihood_trace.push_back(ll);
  const double n = static_cast<double>(values.size());
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    const auto r = detail::responsibilities(values, g);
    double w1 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      w1 += r[i];
      s1 += r[i] * values[i];
      s2 += (1.0 - r[i]) * values[i];
    }
    const double w2 = n - w1;
    if (w1 <= 0.0 || w2 <= 0.0) {
      g.collapsed = true;
      return g;
    }
    GmmFit next = g;
    next.pi = w1 / n;
    next.first.mu = s1 / w1;
    next.second.mu = s2 / w2;
    double v1 = 0.0, v2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      v1 += r[i] * (values[i] - next.first.mu) * (values[i] - next.first.mu);
      v2 += (1.0 - r[i]) * (values[i] - next.second.mu) * (values[i] - next.second.mu);
    }
    next.first.sigma = std::sqrt(v1 / w1);
    next.second.sigma = std::sqrt(v2 / w2);
    if (next.first.sigma < options.collapse_sigma || next.second.sigma < options.collapse_sigma ||
        !(next.pi > 0.0 && next.pi < 1.0)) {
      g.collapsed = true;
      return g;
    }
    const double next_ll = detail::gmm_log_likelihood(values, next);
    next.log_likelihood_trace.push_back(next_ll);
    next.iterations = it + 1;
    g = std::move(next);
    const double gain = next_ll - ll;
    ll = next_ll;
    if (gain < options.tolerance) break;
  }
  return g;
}

/// Adaptive threshold: GMM branch when LogL2 - LogL1 > alpha, threshold =
/// min(max(G0), max(G1)) over posterior-argmax groups; otherwise mu + 2 sigma.
inline ThresholdFit fit_threshold(std::span<const double> values, const ThresholdOptions& options = {}) {
  if (values.size() < options.min_values) {
    throw ValidationError("threshold fit needs at least " + std::to_string(options.min_values) + " values, got " +
                          std::to_string(values.size()));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError("threshold fit got a non-finite value");
  }
  ThresholdFit fit;
  fit.alpha = options.alpha;
  fit.single = detail::moments(values);
  fit.tau = fit.single.mu + 2.0 * fit.single.sigma;
  if (fit.single.sigma <= 0.0) {
    fit.warnings.push_back("all values identical; threshold equals their common value");
    return fit;
  }
  for (double v : values) fit.log_likelihood_single += detail::log_normal_pdf(v, fit.single.mu, fit.single.sigma);

  fit.gmm = fit_gmm2(values, options);
  if (fit.gmm.collapsed) {
    fit.warnings.push_back("GMM collapsed (component sigma below threshold); using the single Gaussian");
    fit.log_likelihood_gmm = fit.log_likelihood_single;
    return fit;
  }
  fit.log_likelihood_gmm = fit.gmm.log_likelihood_trace.back();
  if (!(fit.log_likelihood_gmm - fit.log_likelihood_single > options.alpha)) return fit;

  fit.branch = ThresholdBranch::Gmm2;
  const auto r = detail::responsibilities(values, fit.gmm);
  double max0 = -std::numeric_limits<double>::infinity();
  double max1 = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (r[i] >= 0.5) {
      max0 = std::max(max0, values[i]);
    } else {
      max1 = std::max(max1, values[i]);
    }
  }
  if (!std::isfinite(max0) || !std::isfinite(max1)) {
    fit.warnings.push_back("one GMM cluster is empty; threshold is the largest value");
    fit.tau = std::max(max0, max1);
  } else {
    fit.tau = std::min(max0, max1);
  }
  return fit;
}

inline nlohmann::json to_json(const ThresholdFit& fit) {
  nlohmann::json j{{"branch", std::string(to_string(fit.branch))},
                   {"tau", fit.tau},
                   {"alpha", fit.alpha},
                   {"log_likelihood_single", fit.log_likelihood_single},
                   {"log_likelihood_gmm", fit.log_likelihood_gmm},
                   {"single", {{"mu", fit.single.mu}, {"sigma", fit.single.sigma}}},
                   {"gmm",
                    {{"pi", fit.gmm.pi},
                     {"mu1", fit.gmm.first.mu},
                     {"sigma1", fit.gmm.first.sigma},
                     {"mu2", fit.gmm.second.mu},
                     {"sigma2", fit.gmm.second.sigma},
                     {"iterations", fit.gmm.iterations},
                     {"collapsed", fit.gmm.collapsed}}},
                   {"warnings", fit.warnings}};
  return j;
}

// ---------------------------------------------------------------------------
// Verification and rectification.

enum class VerdictSource { Fusion, Rectified };

struct Verdict {
  std::string episode_id;
  bool accepted = true;
  std::size_t final_choice = 0;
  VerdictSource source = VerdictSource::Fusion;
};

/// Argmax of the elementwise mean of member distributions (ties to lowest index).
inline std::size_t rectified_choice(const std::vector<std::vector<double>>& member_dists) {
  if (member_dists.empty()) throw ValidationError("rectification needs at least one member");
  std::vector<double> mean(member_dists.front().size(), 0.0);
  for (const auto& d : member_dists) {
    if (d.size() != mean.size()) throw ValidationError("member distributions differ in length");
    for (std::size_t c = 0; c < d.size(); ++c) mean[c] += d[c];
  }
  return argmax(mean);
}

/// Keeps the fused choice when epistemic <= tau; otherwise falls back to the member mean.
inline std::vector<Verdict> verify_and_rectify(std::span<const UncertaintyRecord> uncertainties, double tau,
                                               const std::vector<std::vector<std::vector<double>>>& member_dists,
                                               std::span<const std::size_t> fused_choices) {
  if (!std::isfinite(tau)) throw ValidationError("threshold must be finite");
  if (member_dists.size() != uncertainties.size() || fused_choices.size() != uncertainties.size()) {
    throw ValidationError("verify inputs are not aligned");
  }
  std::vector<Verdict> verdicts;
  verdicts.reserve(uncertainties.size());
  for (std::size_t k = 0; k < uncertainties.size(); ++k) {
    Verdict v;
    v.episode_id = uncertainties[k].episode_id;
    v.accepted = uncertainties[k].epistemic <= tau;
    if (v.accepted) {
      v.final_choice = fused_choices[k];
    } else {
      v.final_choice = rectified_choice(member_dists[k]);
      v.source = VerdictSource::Rectified;
    }
    verdicts.push_back(std::move(v));
  }
  return verdicts;
}

/// CSV: episode_id,total,aleatoric,epistemic,accepted,source,final_choice.
inline void write_uncertainty_csv(std::ostream& out, std::span<const UncertaintyRecord> records,
                                  std::span<const Verdict> verdicts) {
  if (records.size() != verdicts.size()) throw ValidationError("uncertainty report inputs are not aligned");
  out << "episode_id,total,aleatoric,epistemic,accepted,source,final_choice\n";
  char buf[128];
  for (std::size_t k = 0; k < records.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.12f,%.12f,%.12f", records[k].total, records[k].aleatoric, records[k].epistemic);
    out << records[k].episode_id << ',' << buf << ',' << (verdicts[k].accepted ? 1 : 0) << ','
        << (verdicts[k].source == VerdictSource::Fusion ? "fusion" : "rectified") << ',' << verdicts[k].final_choice
        << '\n';
  }
}

}  // namespace v3fusion
