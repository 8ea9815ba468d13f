#pragma once

// Synthetic episode logs with known per-model accuracy, grouped co-failure
// and embedding similarity, plus a sidecar recording every latent draw.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "v3fusion/common.hpp"
#include "v3fusion/records.hpp"

namespace v3fusion {

/// Models in a group share a failure latent: each member, independently per
/// episode, follows the shared uniform draw with probability `strength` and
/// its own draw otherwise. Model i fails iff its draw < 1 - accuracy_i.
struct CorrelationGroup {
  std::vector<std::size_t> members;
  double strength = 0.0;
};

struct EmbeddingSpec {
  std::size_t latent_dim = 8;
  std::vector<std::size_t> output_dims;       // per model, each >= latent_dim; default latent_dim + 4
  std::vector<double> noise_scales;           // per model; default 0.5
  std::vector<std::uint64_t> rotation_seeds;  // per model; default model index
};

struct PlantedSpec {
  bool enabled = false;
  std::size_t minority_model = 0;
  double pattern_fraction = 0.3;
};

struct SynthConfig {
  std::size_t num_models = 4;
  std::size_t episodes = 1000;
  std::size_t num_choices = 4;
  TaskKind task_kind = TaskKind::MCQ;
  std::vector<double> accuracies;  // per model; default 0.6
  std::vector<CorrelationGroup> groups;
  EmbeddingSpec embedding;
  PlantedSpec planted;
  double temperature = 1.0;
  double correct_bonus = 1.5;
  std::uint64_t seed = 0;
  std::string model_prefix = "m";

  /// Fills per-model defaults and checks ranges.
  void normalize() {
    if (num_models < 2) throw ValidationError("synthetic pool needs at least 2 models");
    if (num_models > kMaxPoolSize) throw ValidationError("synthetic pool larger than 64 models");
    if (episodes < 1) throw ValidationError("synthetic log needs at least 1 episode");
    if (num_choices < 2) throw ValidationError("synthetic MCQ needs at least 2 choices");
    if (accuracies.empty()) accuracies.assign(num_models, 0.6);
    if (accuracies.size() != num_models) throw ValidationError("one accuracy per model required");
    for (double a : accuracies) {
      if (!(a > 0.0 && a < 1.0)) throw ValidationError("accuracies must lie in (0, 1)");
    }
    std::vector<bool> grouped(num_models, false);
    for (const auto& g : groups) {
      if (!(g.strength >= 0.0 && g.strength <= 1.0)) throw ValidationError("group strength must lie in [0, 1]");
      for (auto i : g.members) {
        if (i >= num_models) throw ValidationError("group member outside the pool");
        if (grouped[i]) throw ValidationError("correlation groups must be disjoint");
        grouped[i] = true;
      }
    }
    auto& e = embedding;
    if (e.latent_dim < 2) throw ValidationError("embedding latent_dim must be >= 2");
    if (e.output_dims.empty()) e.output_dims.assign(num_models, e.latent_dim + 4);
    if (e.noise_scales.empty()) e.noise_scales.assign(num_models, 0.5);
    if (e.rotation_seeds.empty()) {
      for (std::size_t i = 0; i < num_models; ++i) e.rotation_seeds.push_back(i);
    }
    if (e.output_dims.size() != num_models || e.noise_scales.size() != num_models ||
        e.rotation_seeds.size() != num_models) {
      throw ValidationError("embedding spec needs one entry per model");
    }
    for (auto d : e.output_dims) {
      if (d < e.latent_dim) throw ValidationError("embedding output dim must be >= latent_dim");
    }
    if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
    if (planted.enabled) {
      if (task_kind != TaskKind::MCQ) throw ValidationError("planted-signal logs are MCQ only");
      if (planted.minority_model >= num_models) throw ValidationError("minority model outside the pool");
      if (!(planted.pattern_fraction >= 0.0 && planted.pattern_fraction <= 1.0)) {
        throw ValidationError("pattern_fraction must lie in [0, 1]");
      }
      if (num_choices < 3) throw ValidationError("planted-signal logs need at least 3 choices");
    }
  }

  std::string model_id(std::size_t i) const { return model_prefix + std::to_string(i); }
};

/// Ground truth for one episode.
struct TruthRecord {
  std::string episode_id;
  std::size_t label = 0;
  std::string reference;
  TeamMask intended_failures = 0;
  std::vector<double> group_draws;         // shared uniform per group
  std::vector<double> model_draws;         // draw each model compared against 1 - accuracy
  std::vector<bool> used_shared;           // model followed its group latent
  std::vector<std::size_t> targets;        // choice each model's distribution peaks at
  bool pattern = false;                    // planted-signal pattern episode
};

struct SynthOutput {
  PoolManifest manifest;
  std::vector<EpisodeRecord> records;
  std::vector<TruthRecord> truth;
};

namespace detail {

inline std::mt19937_64 episode_rng(std::uint64_t seed, std::size_t episode) {
  return std::mt19937_64(mix64(derive_seed(seed, "synth:episode") + episode));
}

/// out_dim x latent_dim matrix with orthonormal columns.
inline Eigen::MatrixXd random_orthonormal(std::size_t out_dim, std::size_t latent_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(out_dim), static_cast<Eigen::Index>(latent_dim));
  for (Eigen::Index c = 0; c < g.cols(); ++c) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
}

/// Softmax of noisy scores whose argmax is forced to `target`.
inline std::vector<double> peaked_distribution(std::size_t m, std::size_t target, double bonus, double temperature,
                                               std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> scores(m);
  for (auto& s : scores) s = normal(rng);
  double rival = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < m; ++c) {
    if (c != target) rival = std::max(rival, scores[c]);
  }
  scores[target] = rival + bonus + std::abs(0.5 * normal(rng));
  const double peak = scores[target];
  double sum = 0.0;
  for (auto& s : scores) {
    s = std::exp((s - peak) / temperature);
    sum += s;
  }
  for (auto& s : scores) s /= sum;
  return scores;
}

inline std::size_t other_choice(std::size_t m, std::size_t avoid, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, m - 2);
  const std::size_t c = pick(rng);
  return c >= avoid ? c + 1 : c;
}

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "red",   "blue",  "green", "yellow", "balloon", "car",    "tree",  "house", "dog",    "cat",
      "book",  "clock", "bird",  "river",  "bridge",  "window", "chair", "lamp",  "street", "boat"};
  return words;
}

inline void attach_embeddings(const SynthConfig& cfg, std::vector<EpisodeRecord>& records) {
  const auto& e = cfg.embedding;
  std::vector<Eigen::MatrixXd> rotations;
  for (std::size_t i = 0; i < cfg.num_models; ++i) {
    rotations.push_back(random_orthonormal(e.output_dims[i], e.latent_dim,
                                           derive_seed(cfg.seed, "synth:rotation:" + std::to_string(e.rotation_seeds[i]))));
  }
  for (std::size_t k = 0; k < records.size(); ++k) {
    std::mt19937_64 rng(mix64(derive_seed(cfg.seed, "synth:embedding") + k));
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd latent(static_cast<Eigen::Index>(e.latent_dim));
    for (auto& v : latent) v = normal(rng);
    for (std::size_t i = 0; i < cfg.num_models; ++i) {
      const Eigen::VectorXd clean = rotations[i] * latent;
      auto& out = records[k].outputs[i].embedding;
      out.resize(static_cast<std::size_t>(clean.size()));
      for (Eigen::Index d = 0; d < clean.size(); ++d) {
        const double noise = e.noise_scales[i] > 0.0 ? e.noise_scales[i] * normal(rng) : 0.0;
        out[static_cast<std::size_t>(d)] = clean(d) + noise;
      }
    }
  }
}

}  // namespace detail

/// Planted-signal log: on a `pattern_fraction` share of episodes every model
/// except the minority votes one shared wrong choice; the minority model also
/// peaks on that wrong choice but ranks the truth second at a fixed ~0.35
/// level. On the remaining episodes everybody is right and the minority's
/// runner-up stays small, so the truth is always recoverable from the minority.
inline SynthOutput planted_signal_log(SynthConfig cfg) {
  cfg.planted.enabled = true;
  cfg.normalize();
  SynthOutput out;
  for (std::size_t i = 0; i < cfg.num_models; ++i) out.manifest.model_ids.push_back(cfg.model_id(i));
  out.manifest.task_kind = TaskKind::MCQ;
  out.manifest.num_choices_max = cfg.num_choices;
  const std::size_t m = cfg.num_choices;
  const std::size_t minority = cfg.planted.minority_model;
  char id[32];
  for (std::size_t k = 0; k < cfg.episodes; ++k) {
    auto rng = detail::episode_rng(cfg.seed, k);
    std::uniform_int_distribution<std::size_t> pick_label(0, m - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    TruthRecord truth;
    std::snprintf(id, sizeof(id), "e%06zu", k);
    truth.episode_id = id;
    truth.label = pick_label(rng);
    truth.pattern = unit(rng) < cfg.planted.pattern_fraction;
    const std::size_t wrong = detail::other_choice(m, truth.label, rng);
    EpisodeRecord record;
    record.episode_id = truth.episode_id;
    record.task_kind = TaskKind::MCQ;
    record.num_choices = m;
    record.label_choice = truth.label;
    record.outputs.resize(cfg.num_models);
    truth.model_draws.assign(cfg.num_models, 0.0);
    truth.used_shared.assign(cfg.num_models, false);
    for (std::size_t i = 0; i < cfg.num_models; ++i) {
      std::vector<double> probs;
      std::size_t target = truth.pattern ? wrong : truth.label;
      if (i == minority) {
        probs.assign(m, 0.0);
        double rest;
        if (truth.pattern) {
          probs[wrong] = 0.50 + 0.06 * unit(rng);
          probs[truth.label] = 0.32 + 0.06 * unit(rng);
          rest = 1.0 - probs[wrong] - probs[truth.label];
        } else {
          probs[truth.label] = 0.65 + 0.20 * unit(rng);
          rest = 1.0 - probs[truth.label];
        }
        std::vector<std::size_t> others;
        for (std::size_t c = 0; c < m; ++c) {
          if (probs[c] == 0.0) others.push_back(c);
        }
        std::vector<double> weights(others.size());
        double total = 0.0;
        for (auto& w : weights) {
          w = 0.8 + 0.4 * unit(rng);
          total += w;
        }
        for (std::size_t o = 0; o < others.size(); ++o) probs[others[o]] = rest * weights[o] / total;
      } else {
        probs = detail::peaked_distribution(m, target, cfg.correct_bonus, cfg.temperature, rng);
      }
      if (target != truth.label) truth.intended_failures |= TeamMask{1} << i;
      truth.targets.push_back(target);
      record.outputs[i].choice_probs = std::move(probs);
    }
    out.records.push_back(std::move(record));
    out.truth.push_back(std::move(truth));
  }
  detail::attach_embeddings(cfg, out.records);
  return out;
}

/// General generator: labels uniform, grouped co-failures, peaked member
/// distributions (MCQ) or word-substituted answers (OEQ), latent-rotation embeddings.
inline SynthOutput generate(SynthConfig cfg) {
  if (cfg.planted.enabled) return planted_signal_log(std::move(cfg));
  cfg.normalize();
  SynthOutput out;
  for (std::size_t i = 0; i < cfg.num_models; ++i) out.manifest.model_ids.push_back(cfg.model_id(i));
  out.manifest.task_kind = cfg.task_kind;
  out.manifest.num_choices_max = cfg.task_kind == TaskKind::MCQ ? cfg.num_choices : 0;

  std::vector<std::optional<std::size_t>> group_of(cfg.num_models);
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    for (auto i : cfg.groups[g].members) group_of[i] = g;
  }
  const std::size_t m = cfg.num_choices;
  const auto& vocab = detail::vocabulary();
  char id[32];
  for (std::size_t k = 0; k < cfg.episodes; ++k) {
    auto rng = detail::episode_rng(cfg.seed, k);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_word(0, vocab.size() - 1);
    TruthRecord truth;
    std::snprintf(id, sizeof(id), "e%06zu", k);
    truth.episode_id = id;

    EpisodeRecord record;
    record.episode_id = truth.episode_id;
    record.task_kind = cfg.task_kind;
    std::vector<std::string> label_words;
    if (cfg.task_kind == TaskKind::MCQ) {
      truth.label = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
      record.num_choices = m;
      record.label_choice = truth.label;
    } else {
      const std::size_t first = pick_word(rng);
      std::size_t second = pick_word(rng);
      while (second == first) second = pick_word(rng);
      label_words = {vocab[first], vocab[second]};
      truth.reference = label_words[0] + " " + label_words[1];
      record.label_text = truth.reference;
    }

    // Group latents: one shared uniform and one shared wrong choice per group.
    truth.group_draws.resize(cfg.groups.size());
    std::vector<std::size_t> group_wrong(cfg.groups.size(), 0);
    for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
      truth.group_draws[g] = unit(rng);
      group_wrong[g] = cfg.task_kind == TaskKind::MCQ ? detail::other_choice(m, truth.label, rng) : pick_word(rng);
    }
    record.outputs.resize(cfg.num_models);
    truth.model_draws.resize(cfg.num_models);
    truth.used_shared.assign(cfg.num_models, false);
    for (std::size_t i = 0; i < cfg.num_models; ++i) {
      const double own = unit(rng);
      const double follow = unit(rng);
      bool shared = false;
      double draw = own;
      if (group_of[i] && follow < cfg.groups[*group_of[i]].strength) {
        shared = true;
        draw = truth.group_draws[*group_of[i]];
      }
      truth.model_draws[i] = draw;
      truth.used_shared[i] = shared;
      const bool fails = draw < 1.0 - cfg.accuracies[i];
      if (fails) truth.intended_failures |= TeamMask{1} << i;

      auto& output = record.outputs[i];
      if (cfg.task_kind == TaskKind::MCQ) {
        std::size_t target = truth.label;
        if (fails) target = shared ? group_wrong[*group_of[i]] : detail::other_choice(m, truth.label, rng);
        truth.targets.push_back(target);
        output.choice_probs = detail::peaked_distribution(m, target, cfg.correct_bonus, cfg.temperature, rng);
      } else {
        auto words = label_words;
        if (fails) {
          std::size_t replacement = shared ? group_wrong[*group_of[i]] : pick_word(rng);
          while (vocab[replacement] == label_words[0] || vocab[replacement] == label_words[1]) {
            replacement = (replacement + 1) % vocab.size();
          }
          words[unit(rng) < 0.5 ? 0 : 1] = vocab[replacement];
        }
        output.answer_text = "the " + words[0] + " " + words[1];
        truth.targets.push_back(fails ? 1 : 0);
      }
    }
    out.records.push_back(std::move(record));
    out.truth.push_back(std::move(truth));
  }
  detail::attach_embeddings(cfg, out.records);
  return out;
}

inline nlohmann::json to_json(const TruthRecord& t) {
  std::vector<int> shared(t.used_shared.begin(), t.used_shared.end());
  return {{"episode_id", t.episode_id},
          {"label", t.label},
          {"reference", t.reference},
          {"intended_failures", t.intended_failures},
          {"group_draws", t.group_draws},
          {"model_draws", t.model_draws},
          {"used_shared", shared},
          {"targets", t.targets},
          {"pattern", t.pattern}};
}

inline void write_truth_sidecar(std::ostream& out, const std::vector<TruthRecord>& truth) {
  for (const auto& t : truth) out << to_json(t).dump() << '\n';
}

/// P(models a and b both fail) implied by the generator's coupling.
inline double analytic_joint_failure(const SynthConfig& cfg, std::size_t a, std::size_t b) {
  const double fa = 1.0 - cfg.accuracies.at(a);
  const double fb = 1.0 - cfg.accuracies.at(b);
  for (const auto& g : cfg.groups) {
    const bool has_a = std::find(g.members.begin(), g.members.end(), a) != g.members.end();
    const bool has_b = std::find(g.members.begin(), g.members.end(), b) != g.members.end();
    if (has_a && has_b) {
      const double both_shared = g.strength * g.strength;
      return both_shared * std::min(fa, fb) + (1.0 - both_shared) * fa * fb;
    }
  }
  return fa * fb;
}

}  // namespace v3fusion
