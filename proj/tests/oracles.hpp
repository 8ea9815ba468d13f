#pragma once

// Reference computations for the tests. Each one is written from the textbook
// definition with plain loops and std::vector, and shares no code with the
// library it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t t = 0; t < b.size(); ++t) out[i][j] += a[i][t] * b[t][j];
  return out;
}

// K_ij = <x_i, x_j>
inline Mat gram(const Mat& x) {
  const std::size_t n = x.size();
  Mat k = zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t d = 0; d < x[i].size(); ++d) k[i][j] += x[i][d] * x[j][d];
  return k;
}

// H = I - 11^T / n, explicitly materialized.
inline Mat centering(std::size_t n) {
  Mat h = zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) h[i][j] = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
  return h;
}

// HSIC = sum((HKH) o (HLH)) / (n - 1)
inline double hsic(const Mat& k, const Mat& l) {
  const std::size_t n = k.size();
  const Mat h = centering(n);
  const Mat kc = matmul(matmul(h, k), h);
  const Mat lc = matmul(matmul(h, l), h);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s += kc[i][j] * lc[i][j];
  return s / static_cast<double>(n - 1);
}

inline double cka(const Mat& x, const Mat& y) {
  const Mat k = gram(x), l = gram(y);
  return hsic(k, l) / std::sqrt(hsic(k, k) * hsic(l, l));
}

// ---------------------------------------------------------------------------
// Failure statistics. `fail[k][i]` = model i failed episode k.

using Flags = std::vector<std::vector<int>>;

// Exact enumeration: pick an episode, then an ordered pair of distinct members.
inline double rho_by_enumeration(const Flags& fail, const std::vector<std::size_t>& team,
                                 const std::vector<std::size_t>& episodes) {
  double one = 0.0, two = 0.0;
  const double s = static_cast<double>(team.size());
  for (auto k : episodes) {
    for (auto a : team) {
      one += fail[k][a] / s;
      for (auto b : team) {
        if (a != b) two += fail[k][a] * fail[k][b] / (s * (s - 1.0));
      }
    }
  }
  one /= static_cast<double>(episodes.size());
  two /= static_cast<double>(episodes.size());
  if (one == 0.0) return 1.0;
  return std::clamp(1.0 - two / one, 0.0, 1.0);
}

inline double focal_diversity(const Flags& fail, const std::vector<std::size_t>& team) {
  double total = 0.0;
  for (auto focal : team) {
    std::vector<std::size_t> negatives;
    for (std::size_t k = 0; k < fail.size(); ++k)
      if (fail[k][focal]) negatives.push_back(k);
    total += negatives.empty() ? 1.0 : rho_by_enumeration(fail, team, negatives);
  }
  return total / static_cast<double>(team.size());
}

// Monte-Carlo model picking: draw an episode from p (j failures out of S),
// draw one / two distinct members uniformly, count failures.
struct MonteCarloRho {
  double rho, p_one, p_two, se_one, se_two;
};

inline MonteCarloRho monte_carlo_rho(const std::vector<double>& p, std::size_t s, std::size_t draws,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> weights(p.begin(), p.end());
  double none = 1.0;
  for (double v : p) none -= v;
  weights.insert(weights.begin(), std::max(0.0, none));  // index 0 = nobody fails
  std::discrete_distribution<std::size_t> pick_j(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> pick_member(0, s - 1);
  double hits_one = 0, hits_two = 0;
  for (std::size_t t = 0; t < draws; ++t) {
    const std::size_t j = pick_j(rng);  // members 0..j-1 fail
    const std::size_t a = pick_member(rng);
    std::size_t b = pick_member(rng);
    while (b == a) b = pick_member(rng);
    hits_one += a < j;
    hits_two += (a < j) && (b < j);
  }
  const double n = static_cast<double>(draws);
  const double p1 = hits_one / n, p2 = hits_two / n;
  return {1.0 - p2 / p1, p1, p2, std::sqrt(p1 * (1 - p1) / n), std::sqrt(p2 * (1 - p2) / n)};
}

// Fleiss' kappa from the n_ij subject-by-category table.
inline double fleiss_kappa(const Flags& fail, const std::vector<std::size_t>& team) {
  const double n = static_cast<double>(team.size());
  const double subjects = static_cast<double>(fail.size());
  std::vector<std::vector<double>> table;
  for (const auto& row : fail) {
    double f = 0;
    for (auto i : team) f += row[i];
    table.push_back({n - f, f});
  }
  double p_bar = 0.0;
  std::vector<double> pj(2, 0.0);
  for (const auto& row : table) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
      sq += row[j] * row[j];
      pj[j] += row[j];
    }
    p_bar += (sq - n) / (n * (n - 1.0));
  }
  p_bar /= subjects;
  double pe = 0.0;
  for (double& v : pj) {
    v /= subjects * n;
    pe += v * v;
  }
  if (pe >= 1.0 - 1e-15) return 1.0;
  return (p_bar - pe) / (1.0 - pe);
}

inline std::vector<double> column(const Flags& fail, std::size_t i) {
  std::vector<double> c;
  for (const auto& row : fail) c.push_back(row[i]);
  return c;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Cohen's kappa from a 2x2 confusion table between two raters.
inline double cohen(const std::vector<double>& x, const std::vector<double>& y) {
  double t[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < x.size(); ++i) t[static_cast<int>(x[i])][static_cast<int>(y[i])] += 1;
  const double n = static_cast<double>(x.size());
  const double po = (t[0][0] + t[1][1]) / n;
  double pe = 0;
  for (int c = 0; c < 2; ++c) pe += ((t[c][0] + t[c][1]) / n) * ((t[0][c] + t[1][c]) / n);
  if (pe >= 1.0 - 1e-15) return 0.0;
  return (po - pe) / (1.0 - pe);
}

template <class F>
double mean_over_pairs(const Flags& fail, const std::vector<std::size_t>& team, F f) {
  double total = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < team.size(); ++a)
    for (std::size_t b = a + 1; b < team.size(); ++b, ++pairs)
      total += f(column(fail, team[a]), column(fail, team[b]));
  return total / pairs;
}

inline double disagreement(const std::vector<double>& x, const std::vector<double>& y) {
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) d += x[i] != y[i];
  return d / static_cast<double>(x.size());
}

// Mean over episodes of the base-2 entropy of the failed/correct vote split.
inline double vote_entropy(const Flags& fail, const std::vector<std::size_t>& team) {
  double total = 0;
  for (const auto& row : fail) {
    double f = 0;
    for (auto i : team) f += row[i];
    const double q = f / static_cast<double>(team.size());
    double h = 0;
    for (double v : {q, 1.0 - q})
      if (v > 0) h -= v * std::log(v) / std::log(2.0);
    total += h;
  }
  return total / static_cast<double>(fail.size());
}

// ---------------------------------------------------------------------------
// Exhaustive argmax over teams, written as a recursive include/exclude walk.

template <class Fitness>
void walk(std::size_t n, std::size_t i, std::vector<std::size_t>& chosen, Fitness& f, double& best,
          std::vector<std::size_t>& best_team) {
  if (i == n) {
    if (chosen.size() < 2) return;
    const double v = f(chosen);
    bool take = v > best;
    if (v == best) {
      // smaller team first, then lexicographically smaller member list
      take = chosen.size() < best_team.size() ||
             (chosen.size() == best_team.size() && chosen < best_team);
    }
    if (take) {
      best = v;
      best_team = chosen;
    }
    return;
  }
  walk(n, i + 1, chosen, f, best, best_team);
  chosen.push_back(i);
  walk(n, i + 1, chosen, f, best, best_team);
  chosen.pop_back();
}

template <class Fitness>
std::pair<double, std::vector<std::size_t>> exhaustive_best(std::size_t n, Fitness f) {
  std::vector<std::size_t> chosen, best_team;
  double best = -1e300;
  walk(n, 0, chosen, f, best, best_team);
  return {best, best_team};
}

// ---------------------------------------------------------------------------
// Entropy and a plain two-component EM.

inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h += -v * std::log(v);
  return h;
}

struct Em {
  double pi, mu1, s1, mu2, s2;
  std::vector<double> trace;
};

inline double normal_pdf(double x, double mu, double s) {
  const double pi = 3.14159265358979323846;
  return std::exp(-0.5 * (x - mu) * (x - mu) / (s * s)) / (s * std::sqrt(2 * pi));
}

// Same initialization convention (median split, moment match, pi = 0.5) so
// results can be compared parameter by parameter.
inline Em em(std::vector<double> x, int max_iter = 200, double tol = 1e-6) {
  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t h = sorted.size() / 2;
  auto moments = [](const std::vector<double>& v, std::size_t lo, std::size_t hi, double& mu, double& s) {
    mu = 0;
    for (std::size_t i = lo; i < hi; ++i) mu += v[i];
    mu /= static_cast<double>(hi - lo);
    double var = 0;
    for (std::size_t i = lo; i < hi; ++i) var += (v[i] - mu) * (v[i] - mu);
    s = std::sqrt(var / static_cast<double>(hi - lo));
  };
  Em e{0.5, 0, 0, 0, 0, {}};
  moments(sorted, 0, h, e.mu1, e.s1);
  moments(sorted, h, sorted.size(), e.mu2, e.s2);
  auto loglik = [&] {
    double ll = 0;
    for (double v : x) ll += std::log(e.pi * normal_pdf(v, e.mu1, e.s1) + (1 - e.pi) * normal_pdf(v, e.mu2, e.s2));
    return ll;
  };
  e.trace.push_back(loglik());
  for (int it = 0; it < max_iter; ++it) {
    double n1 = 0, a1 = 0, a2 = 0;
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double p1 = e.pi * normal_pdf(x[i], e.mu1, e.s1);
      const double p2 = (1 - e.pi) * normal_pdf(x[i], e.mu2, e.s2);
      r[i] = p1 / (p1 + p2);
      n1 += r[i];
      a1 += r[i] * x[i];
      a2 += (1 - r[i]) * x[i];
    }
    const double n2 = static_cast<double>(x.size()) - n1;
    e.pi = n1 / static_cast<double>(x.size());
    e.mu1 = a1 / n1;
    e.mu2 = a2 / n2;
    double v1 = 0, v2 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      v1 += r[i] * (x[i] - e.mu1) * (x[i] - e.mu1);
      v2 += (1 - r[i]) * (x[i] - e.mu2) * (x[i] - e.mu2);
    }
    e.s1 = std::sqrt(v1 / n1);
    e.s2 = std::sqrt(v2 / n2);
    e.trace.push_back(loglik());
    if (e.trace.back() - e.trace[e.trace.size() - 2] < tol) break;
  }
  return e;
}

}  // namespace oracle
