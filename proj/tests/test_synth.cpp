#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "v3fusion/cka.hpp"
#include "v3fusion/error_diversity.hpp"
#include "v3fusion/eval_report.hpp"
#include "v3fusion/synth.hpp"

using namespace v3fusion;

namespace {

double joint_rate(const FailureMatrix& f, std::size_t a, std::size_t b) {
  double both = 0;
  for (std::size_t k = 0; k < f.episodes(); ++k) both += f.failed(k, a) && f.failed(k, b);
  return both / static_cast<double>(f.episodes());
}

double binomial_se(double p, std::size_t n) { return std::sqrt(p * (1 - p) / static_cast<double>(n)); }

}  // namespace

TEST(Synth, FullStrengthGroupFailsTogether) {
  SynthConfig cfg;
  cfg.num_models = 3;
  cfg.episodes = 2000;
  cfg.accuracies = {0.6, 0.6, 0.7};
  cfg.groups = {{{0, 1}, 1.0}};
  const auto out = generate(cfg);
  const auto f = failure_flags(out.records, 3);
  for (std::size_t k = 0; k < f.episodes(); ++k) EXPECT_EQ(f.failed(k, 0), f.failed(k, 1));
  // Grouped failures share the wrong choice too.
  for (const auto& t : out.truth) {
    if (t.intended_failures & 1) {
      EXPECT_EQ(t.targets[0], t.targets[1]);
    }
  }
}

TEST(Synth, IndependentModelsMatchProductRate) {
  SynthConfig cfg;
  cfg.num_models = 3;
  cfg.episodes = 20000;
  cfg.accuracies = {0.6, 0.7, 0.5};
  cfg.groups = {{{0, 1}, 0.0}};
  cfg.embedding.latent_dim = 2;
  const auto out = generate(cfg);
  const auto f = failure_flags(out.records, 3);
  for (auto [a, b] : {std::pair{0, 1}, std::pair{0, 2}, std::pair{1, 2}}) {
    const double expected = analytic_joint_failure(cfg, a, b);
    EXPECT_NEAR(expected, (1 - cfg.accuracies[a]) * (1 - cfg.accuracies[b]), 1e-15);
    EXPECT_NEAR(joint_rate(f, a, b), expected, 3 * binomial_se(expected, cfg.episodes));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = 1 - cfg.accuracies[i];
    EXPECT_NEAR(f.failure_rate(i), p, 3 * binomial_se(p, cfg.episodes));
  }
}

TEST(Synth, PartialStrengthMatchesAnalyticJointRate) {
  SynthConfig cfg;
  cfg.num_models = 2;
  cfg.episodes = 20000;
  cfg.accuracies = {0.6, 0.7};
  cfg.groups = {{{0, 1}, 0.6}};
  cfg.embedding.latent_dim = 2;
  const auto out = generate(cfg);
  const auto f = failure_flags(out.records, 2);
  const double expected = analytic_joint_failure(cfg, 0, 1);
  EXPECT_NEAR(expected, 0.36 * 0.3 + 0.64 * 0.12, 1e-15);
  EXPECT_NEAR(joint_rate(f, 0, 1), expected, 3 * binomial_se(expected, cfg.episodes));
}

TEST(Synth, NoiselessEmbeddingsAreRotationsOfOneLatent) {
  SynthConfig cfg;
  cfg.num_models = 3;
  cfg.episodes = 200;
  cfg.embedding.latent_dim = 5;
  cfg.embedding.output_dims = {5, 9, 12};
  cfg.embedding.noise_scales = {0, 0, 0};
  const auto set = extract_embeddings(generate(cfg).records, 3);
  EXPECT_NEAR(cka(set.per_model[0], set.per_model[1]), 1.0, 1e-9);
  EXPECT_NEAR(cka(set.per_model[1], set.per_model[2]), 1.0, 1e-9);
  cfg.embedding.noise_scales = {0, 3, 0};
  const auto noisy = extract_embeddings(generate(cfg).records, 3);
  EXPECT_LT(cka(noisy.per_model[0], noisy.per_model[1]), 0.9);
}

TEST(Synth, PlantedLogHidesTruthFromThePlurality) {
  SynthConfig cfg;
  cfg.num_models = 5;
  cfg.episodes = 5000;
  cfg.planted.enabled = true;
  cfg.planted.pattern_fraction = 0.3;
  cfg.planted.minority_model = 4;
  const auto out = generate(cfg);
  std::size_t correct = 0;
  for (const auto& r : out.records) {
    std::vector<std::vector<double>> d;
    for (const auto& o : r.outputs) d.push_back(o.choice_probs);
    correct += plurality_vote(d) == r.label_choice;
  }
  const double acc = static_cast<double>(correct) / 5000.0;
  EXPECT_NEAR(acc, 0.7, 3 * binomial_se(0.7, 5000));
  for (std::size_t k = 0; k < out.records.size(); ++k) {
    const auto& probs = out.records[k].outputs[4].choice_probs;
    // The truth is the minority's top or runner-up choice.
    std::vector<double> sorted = probs;
    std::sort(sorted.rbegin(), sorted.rend());
    EXPECT_GE(probs[out.records[k].label_choice], sorted[1]);
  }
}

TEST(Synth, DeterministicAndValidAgainstIngest) {
  SynthConfig cfg;
  cfg.num_models = 4;
  cfg.episodes = 50;
  cfg.seed = 77;
  cfg.groups = {{{1, 2}, 0.5}};
  const auto a = generate(cfg);
  const auto b = generate(cfg);
  EXPECT_EQ(a.records, b.records);
  std::stringstream log;
  serialize(log, a.records, a.manifest);
  EXPECT_EQ(ingest(log, a.manifest), a.records);
  cfg.seed = 78;
  EXPECT_FALSE(generate(cfg).records == a.records);
}

TEST(Synth, OpenEndedAnswersFollowFailureDraws) {
  SynthConfig cfg;
  cfg.num_models = 3;
  cfg.episodes = 300;
  cfg.task_kind = TaskKind::OEQ;
  const auto out = generate(cfg);
  const auto f = failure_flags(out.records, 3);
  for (std::size_t k = 0; k < out.records.size(); ++k) {
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(f.failed(k, i), ((out.truth[k].intended_failures >> i) & 1) != 0);
    }
  }
}

TEST(Synth, ConfigValidation) {
  SynthConfig cfg;
  cfg.accuracies = {0.5};
  EXPECT_THROW(generate(cfg), ValidationError);
  cfg = {};
  cfg.groups = {{{0, 1}, 0.5}, {{1, 2}, 0.5}};
  EXPECT_THROW(generate(cfg), ValidationError);
  cfg = {};
  cfg.planted.enabled = true;
  cfg.num_choices = 2;
  EXPECT_THROW(generate(cfg), ValidationError);
}
