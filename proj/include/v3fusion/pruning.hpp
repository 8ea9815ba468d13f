#pragma once

// Ensemble pruning over the team lattice: counting/enumeration, the fitness
// function, exhaustive search, and a bitmask genetic algorithm.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "v3fusion/cka.hpp"
#include "v3fusion/common.hpp"
#include "v3fusion/error_diversity.hpp"
#include "v3fusion/records.hpp"

namespace v3fusion {

// ---------------------------------------------------------------------------
// Team lattice.

/// 2^N - N - 1: subsets of size >= 2.
inline std::uint64_t count_teams(std::size_t n) {
  if (n < 2) throw ValidationError("pool needs at least 2 models");
  if (n > 63) throw ValidationError("pool larger than 63 models cannot be counted in 64 bits");
  return (std::uint64_t{1} << n) - n - 1;
}

/// Lazy range over every team mask of size >= 2, ascending.
class TeamRange {
 public:
  class iterator {
   public:
    using value_type = TeamMask;
    using difference_type = std::ptrdiff_t;

    iterator() = default;
    iterator(TeamMask current, TeamMask end) : current_(current), end_(end) { skip(); }
    TeamMask operator*() const { return current_; }
    iterator& operator++() {
      ++current_;
      skip();
      return *this;
    }
    iterator operator++(int) {
      auto copy = *this;
      ++*this;
      return copy;
    }
    bool operator==(const iterator& other) const { return current_ == other.current_; }

   private:
    void skip() {
      while (current_ < end_ && std::popcount(current_) < 2) ++current_;
    }
    TeamMask current_ = 0;
    TeamMask end_ = 0;
  };

  explicit TeamRange(std::size_t n) : n_(n) {
    if (n < 2) throw ValidationError("pool needs at least 2 models");
    if (n > 63) throw ValidationError("team enumeration supports at most 63 models");
  }
  iterator begin() const { return {3, end_mask()}; }
  iterator end() const { return {end_mask(), end_mask()}; }
  std::uint64_t size() const { return count_teams(n_); }

 private:
  TeamMask end_mask() const { return TeamMask{1} << n_; }
  std::size_t n_;
};

inline TeamRange enumerate_teams(std::size_t n) { return TeamRange(n); }

/// Every team as a vector; refused above 30 models.
inline std::vector<TeamMask> materialize_teams(std::size_t n) {
  if (n > 30) throw ValidationError("refusing to materialize 2^N teams for N > 30; iterate instead");
  std::vector<TeamMask> teams;
  teams.reserve(count_teams(n));
  for (auto mask : enumerate_teams(n)) teams.push_back(mask);
  return teams;
}

/// Tie order among equal-fitness teams: smaller team first, then the
/// lexicographically smaller sorted member list.
inline bool preferred_on_tie(TeamMask a, TeamMask b) {
  const int sa = std::popcount(a);
  const int sb = std::popcount(b);
  if (sa != sb) return sa < sb;
  if (a == b) return false;
  const TeamMask lowest_difference = (a ^ b) & (~(a ^ b) + 1);
  return (a & lowest_difference) != 0;
}

// ---------------------------------------------------------------------------
// Fitness.

enum class FitnessComponent { FocalError, FocalCka, FleissKappa, PluralityAcc };

inline constexpr FitnessComponent kAllFitnessComponents[] = {
    FitnessComponent::FocalError, FitnessComponent::FocalCka, FitnessComponent::FleissKappa,
    FitnessComponent::PluralityAcc};

inline std::string_view to_string(FitnessComponent c) {
  switch (c) {
    case FitnessComponent::FocalError: return "focal_error";
    case FitnessComponent::FocalCka: return "focal_cka";
    case FitnessComponent::FleissKappa: return "fleiss_kappa";
    case FitnessComponent::PluralityAcc: return "plurality_acc";
  }
  return "?";
}

inline FitnessComponent parse_fitness_component(std::string_view name) {
  for (auto c : kAllFitnessComponents) {
    if (to_string(c) == name) return c;
  }
  throw ValidationError("unknown fitness component '" + std::string(name) + "'");
}

struct FitnessConfig {
  std::map<FitnessComponent, double> weights;

  void validate() const {
    double sum = 0.0;
    bool any = false;
    for (const auto& [c, w] : weights) {
      if (!(w >= 0.0)) throw ValidationError("fitness weight for " + std::string(to_string(c)) + " is negative");
      sum += w;
      any = any || w > 0.0;
    }
    if (!any) throw ValidationError("fitness needs at least one nonzero weight");
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("fitness weights must sum to 1");
  }

  double weight(FitnessComponent c) const {
    const auto it = weights.find(c);
    return it == weights.end() ? 0.0 : it->second;
  }

  /// Unweighted mean of the two focal scores.
  static FitnessConfig focal_mean() {
    return {{{FitnessComponent::FocalError, 0.5}, {FitnessComponent::FocalCka, 0.5}}};
  }

  /// MCQ default: 0.5 on the focal score (itself the mean of both focal
  /// metrics), 0.25 on Fleiss' kappa disagreement, 0.25 on plurality accuracy.
  static FitnessConfig mcq_default() {
    return {{{FitnessComponent::FocalError, 0.25},
             {FitnessComponent::FocalCka, 0.25},
             {FitnessComponent::FleissKappa, 0.25},
             {FitnessComponent::PluralityAcc, 0.25}}};
  }

  /// Open-ended tasks prune on focal error diversity alone.
  static FitnessConfig oeq_default() { return {{{FitnessComponent::FocalError, 1.0}}}; }

  /// Parses "k=v,k=v".
  static FitnessConfig parse(std::string_view spec) {
    FitnessConfig cfg;
    std::size_t pos = 0;
    while (pos < spec.size()) {
      auto comma = spec.find(',', pos);
      if (comma == std::string_view::npos) comma = spec.size();
      const auto item = spec.substr(pos, comma - pos);
      const auto eq = item.find('=');
      if (eq == std::string_view::npos) throw ValidationError("fitness weight '" + std::string(item) + "' lacks '='");
      const auto component = parse_fitness_component(item.substr(0, eq));
      try {
        cfg.weights[component] = std::stod(std::string(item.substr(eq + 1)));
      } catch (const std::exception&) {
        throw ValidationError("fitness weight '" + std::string(item) + "' is not a number");
      }
      pos = comma + 1;
    }
    cfg.validate();
    return cfg;
  }
};

struct ComponentScores {
  std::optional<double> focal_error;
  std::optional<double> focal_cka;
  std::optional<double> fleiss_kappa;
  std::optional<double> plurality_acc;
};

struct ScoredTeam {
  TeamMask mask = 0;
  ComponentScores scores;
  double fitness = 0.0;

  std::size_t size() const { return static_cast<std::size_t>(std::popcount(mask)); }
};

/// Scores a team; must be pure so that evaluation order cannot change results.
using TeamScorer = std::function<ScoredTeam(TeamMask)>;

/// Adapts a plain fitness function.
inline TeamScorer fitness_only(std::function<double(TeamMask)> fn) {
  return [fn = std::move(fn)](TeamMask mask) { return ScoredTeam{mask, {}, fn(mask)}; };
}

/// Member argmax votes on a scoring split, for plurality accuracy inside fitness.
struct VoteTable {
  std::vector<std::vector<std::size_t>> votes;  // [episode][model]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> num_choices;

  static VoteTable from_records(const std::vector<EpisodeRecord>& records) {
    VoteTable t;
    for (const auto& r : records) {
      if (r.task_kind != TaskKind::MCQ) throw ValidationError("plurality accuracy needs MCQ records");
      std::vector<std::size_t> row;
      row.reserve(r.outputs.size());
      for (const auto& out : r.outputs) row.push_back(argmax(out.choice_probs));
      t.votes.push_back(std::move(row));
      t.labels.push_back(r.label_choice);
      t.num_choices.push_back(r.num_choices);
    }
    return t;
  }

  /// Fraction of episodes where the team's plurality vote is correct (ties to lowest index).
  double plurality_accuracy(TeamMask team) const {
    if (votes.empty()) throw ValidationError("plurality accuracy over an empty split");
    const auto members = team_members(team);
    std::size_t correct = 0;
    std::vector<std::size_t> tally;
    for (std::size_t k = 0; k < votes.size(); ++k) {
      tally.assign(num_choices[k], 0);
      for (auto i : members) ++tally[votes[k][i]];
      std::size_t best = 0;
      for (std::size_t c = 1; c < tally.size(); ++c) {
        if (tally[c] > tally[best]) best = c;
      }
      if (best == labels[k]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(votes.size());
  }
};

/// Inputs to the fitness function. Diversity components come from the
/// analysis split; plurality accuracy from the train split.
struct FitnessInputs {
  const FailureMatrix* failures = nullptr;
  const FocalSimilarity* similarity = nullptr;  // null when embeddings are unavailable
  const VoteTable* train_votes = nullptr;
};

/// Computes every component the config asks for and their weighted sum.
/// Fleiss' kappa contributes (1 - kappa); the reported score stays raw kappa.
inline ScoredTeam score_team(TeamMask team, const FitnessInputs& in, const FitnessConfig& cfg) {
  if (std::popcount(team) < 2) throw ValidationError("ensemble needs at least 2 members");
  ScoredTeam out{team, {}, 0.0};
  for (const auto& [component, weight] : cfg.weights) {
    double value = 0.0;
    switch (component) {
      case FitnessComponent::FocalError:
        if (!in.failures) throw ValidationError("fitness component focal_error unavailable: no failure matrix");
        value = focal_diversity(*in.failures, team).value;
        out.scores.focal_error = value;
        break;
      case FitnessComponent::FocalCka:
        if (!in.similarity) throw ValidationError("fitness component focal_cka unavailable: no embeddings");
        value = focal_cka(team, *in.similarity).value;
        out.scores.focal_cka = value;
        break;
      case FitnessComponent::FleissKappa:
        if (!in.failures) throw ValidationError("fitness component fleiss_kappa unavailable: no failure matrix");
        // Agreement enters as disagreement so every term rewards diversity.
        out.scores.fleiss_kappa = fleiss_kappa(*in.failures, team).value;
        value = 1.0 - *out.scores.fleiss_kappa;
        break;
      case FitnessComponent::PluralityAcc:
        if (!in.train_votes) throw ValidationError("fitness component plurality_acc unavailable: no train votes");
        value = in.train_votes->plurality_accuracy(team);
        out.scores.plurality_acc = value;
        break;
    }
    out.fitness += weight * value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exhaustive search.

struct BruteForceResult {
  ScoredTeam best;
  std::vector<ScoredTeam> table;  // every team, ascending mask order
};

inline bool better_team(const ScoredTeam& a, const ScoredTeam& b) {
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  return preferred_on_tie(a.mask, b.mask);
}

inline BruteForceResult brute_force_prune(std::size_t n, const TeamScorer& scorer, std::size_t ceiling = 20) {
  if (n > ceiling) {
    throw ValidationError("brute force over " + std::to_string(n) + " models exceeds the ceiling of " +
                          std::to_string(ceiling) + "; use the genetic algorithm");
  }
  const auto teams = materialize_teams(n);
  BruteForceResult result;
  result.table.resize(teams.size());
  parallel_for(teams.size(), [&](std::size_t t) { result.table[t] = scorer(teams[t]); });
  result.best = result.table.front();
  for (const auto& team : result.table) {
    if (better_team(team, result.best)) result.best = team;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Genetic algorithm.

struct GaConfig {
  std::size_t population_size = 64;
  std::optional<double> mutation_rate;  // default 1/N
  std::size_t tournament_k = 3;
  std::size_t elitism_count = 2;
  std::size_t stall_generations = 100;
  std::size_t max_generations = 2000;
  std::uint64_t seed = 0;
  std::vector<TeamMask> initial_population;  // optional; random when empty

  void validate() const {
    if (population_size < 4) throw ValidationError("GA population_size must be >= 4");
    if (stall_generations < 1) throw ValidationError("GA stall_generations must be >= 1");
    if (tournament_k < 1) throw ValidationError("GA tournament_k must be >= 1");
    if (elitism_count > population_size) throw ValidationError("GA elitism_count exceeds population");
    if (mutation_rate && !(*mutation_rate >= 0.0 && *mutation_rate <= 1.0)) {
      throw ValidationError("GA mutation_rate must lie in [0, 1]");
    }
  }
};

struct GenerationStats {
  std::size_t generation = 0;
  TeamMask best_mask = 0;
  double best_fitness = 0.0;
  double mean_fitness = 0.0;
  std::size_t evaluations = 0;  // distinct teams scored so far
};

struct GaResult {
  ScoredTeam best;
  std::vector<GenerationStats> trace;
  std::unordered_map<TeamMask, ScoredTeam> evaluated;
};

inline GaResult ga_prune(std::size_t n, const TeamScorer& scorer, const GaConfig& cfg) {
  cfg.validate();
  if (n < 3) throw ValidationError("GA needs at least 3 models");
  if (n > kMaxPoolSize) throw ValidationError("GA supports at most 64 models");
  const double mutation = cfg.mutation_rate.value_or(1.0 / static_cast<double>(n));
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_bit(0, n - 1);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution flip(mutation);

  auto repair = [&](TeamMask mask) {
    while (std::popcount(mask) < 2) mask |= TeamMask{1} << pick_bit(rng);
    return mask;
  };

  std::vector<TeamMask> population = cfg.initial_population;
  if (population.empty()) {
    population.reserve(cfg.population_size);
    for (std::size_t p = 0; p < cfg.population_size; ++p) {
      TeamMask mask = 0;
      for (std::size_t b = 0; b < n; ++b) {
        if (coin(rng)) mask |= TeamMask{1} << b;
      }
      population.push_back(repair(mask));
    }
  } else {
    for (auto& mask : population) mask = repair(mask & full_team(n));
  }

  GaResult result;
  auto evaluate = [&](const std::vector<TeamMask>& masks) {
    std::vector<TeamMask> pending;
    for (auto m : masks) {
      if (!result.evaluated.contains(m) && std::find(pending.begin(), pending.end(), m) == pending.end()) {
        pending.push_back(m);
      }
    }
    std::vector<ScoredTeam> scored(pending.size());
    parallel_for(pending.size(), [&](std::size_t i) { scored[i] = scorer(pending[i]); });
    for (std::size_t i = 0; i < pending.size(); ++i) result.evaluated.emplace(pending[i], scored[i]);
  };

  std::size_t stall = 0;
  bool have_best = false;
  for (std::size_t generation = 0;; ++generation) {
    evaluate(population);
    std::vector<const ScoredTeam*> ranked;
    ranked.reserve(population.size());
    double mean = 0.0;
    for (auto m : population) {
      ranked.push_back(&result.evaluated.at(m));
      mean += ranked.back()->fitness;
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const ScoredTeam* a, const ScoredTeam* b) { return better_team(*a, *b); });
    const ScoredTeam& leader = *ranked.front();
    if (!have_best || leader.fitness > result.best.fitness) {
      result.best = leader;
      have_best = true;
      stall = 0;
    } else {
      if (better_team(leader, result.best)) result.best = leader;
      ++stall;
    }
    result.trace.push_back({generation, result.best.mask, result.best.fitness,
                            mean / static_cast<double>(population.size()), result.evaluated.size()});
    if (stall >= cfg.stall_generations || generation + 1 >= cfg.max_generations) break;

    std::uniform_int_distribution<std::size_t> pick(0, population.size() - 1);
    auto tournament = [&]() {
      const ScoredTeam* winner = &result.evaluated.at(population[pick(rng)]);
      for (std::size_t t = 1; t < cfg.tournament_k; ++t) {
        const ScoredTeam* challenger = &result.evaluated.at(population[pick(rng)]);
        if (better_team(*challenger, *winner)) winner = challenger;
      }
      return winner->mask;
    };

    std::vector<TeamMask> next;
    next.reserve(cfg.population_size);
    for (std::size_t e = 0; e < std::min(cfg.elitism_count, ranked.size()); ++e) next.push_back(ranked[e]->mask);
    while (next.size() < cfg.population_size) {
      const TeamMask a = tournament();
      const TeamMask b = tournament();
      TeamMask child = 0;
      for (std::size_t bit = 0; bit < n; ++bit) {
        const TeamMask parent = coin(rng) ? a : b;
        bool on = (parent >> bit) & 1U;
        if (flip(rng)) on = !on;
        if (on) child |= TeamMask{1} << bit;
      }
      next.push_back(repair(child));
    }
    population = std::move(next);
  }
  return result;
}

// ---------------------------------------------------------------------------

/// Surface CSV: bitmask, size, focal_error, focal_cka, fleiss_kappa, plurality_acc, fitness.
/// Missing components are left empty.
inline void write_surface_csv(std::ostream& out, const std::vector<ScoredTeam>& table) {
  out << "bitmask,size,focal_error,focal_cka,fleiss_kappa,plurality_acc,fitness\n";
  char buf[64];
  auto cell = [&](const std::optional<double>& v) {
    out << ',';
    if (v) {
      std::snprintf(buf, sizeof(buf), "%.10f", *v);
      out << buf;
    }
  };
  for (const auto& team : table) {
    out << team.mask << ',' << team.size();
    cell(team.scores.focal_error);
    cell(team.scores.focal_cka);
    cell(team.scores.fleiss_kappa);
    cell(team.scores.plurality_acc);
    cell(team.fitness);
    out << '\n';
  }
}

}  // namespace v3fusion
