#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "v3fusion/fusion_mlp.hpp"

using namespace v3fusion;

namespace {

EpisodeRecord mcq(std::string id, std::size_t label, std::vector<std::vector<double>> member_probs) {
  EpisodeRecord r;
  r.episode_id = std::move(id);
  r.label_choice = label;
  r.num_choices = member_probs.front().size();
  for (auto& p : member_probs) r.outputs.push_back({std::move(p), std::nullopt, {}});
  return r;
}

std::vector<double> random_simplex(std::size_t m, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(m);
  double sum = 0.0;
  for (auto& v : p) sum += v = e(rng);
  for (auto& v : p) v /= sum;
  return p;
}

// Member 0 always peaks on the label; members 1 and 2 are noise.
std::vector<EpisodeRecord> oracle_member_log(std::size_t episodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  std::vector<EpisodeRecord> out;
  for (std::size_t k = 0; k < episodes; ++k) {
    const auto label = pick(rng);
    std::vector<double> good(4, 0.1);
    good[label] = 0.7;
    out.push_back(mcq("e" + std::to_string(k), label, {good, random_simplex(4, rng), random_simplex(4, rng)}));
  }
  return out;
}

}  // namespace

TEST(Features, ZeroPaddedPerMember) {
  const auto r = mcq("e", 2, {{0.2, 0.3, 0.5}, {0.1, 0.1, 0.8}});
  const auto f = assemble_features(r, 0b11, 4);
  Eigen::VectorXd expected(8);
  expected << 0.2, 0.3, 0.5, 0, 0.1, 0.1, 0.8, 0;
  EXPECT_EQ(f, expected);
  // Only the selected members, in manifest order.
  const auto g = assemble_features(mcq("e", 0, {{1, 0}, {0.5, 0.5}, {0, 1}}), 0b101, 2);
  Eigen::VectorXd picked(4);
  picked << 1, 0, 0, 1;
  EXPECT_EQ(g, picked);
  EXPECT_THROW(assemble_features(r, 0b11, 2), ValidationError);
}

TEST(Forward, ZeroWeightsGiveUniformOutput) {
  const auto model = make_fusion_model(8, {100, 100}, 4);
  const auto out = forward(model, Eigen::VectorXd::Constant(8, 0.25));
  for (Eigen::Index c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(out(c), 0.25);
  EXPECT_EQ(model.layers(), 3u);
  EXPECT_EQ(model.parameter_count(), 8u * 100 + 100 + 100 * 100 + 100 + 100 * 4 + 4);
}

TEST(Backprop, MatchesFiniteDifferences) {
  for (auto act : {Activation::ReLU, Activation::Sigmoid}) {
    std::mt19937_64 rng(7);
    auto model = make_fusion_model(6, {5, 4}, 3, act);
    xavier_init(model, rng);
    for (auto& b : model.biases) b.setConstant(0.05);  // keep ReLU units away from the kink
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(5, 6);
    const std::vector<std::size_t> y = {0, 2, 1, 1, 0};
    EXPECT_LT(gradient_check(model, x, y), 1e-4) << to_string(act);
    const double tampered = gradient_check(model, x, y, 1e-5, [](Gradients& g) { g.weights[1](0, 0) += 0.05; });
    EXPECT_GT(tampered, 1e-2);
  }
}

TEST(Train, DeterministicForFixedSeed) {
  const auto log = oracle_member_log(120, 3);
  const auto data = build_fusion_dataset(log, 0b111, 4);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.hidden = {16, 16};
  cfg.seed = 9;
  const auto a = train(data, nullptr, cfg, 4);
  const auto b = train(data, nullptr, cfg, 4);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.metadata.train_loss, b.metadata.train_loss);
  cfg.seed = 10;
  EXPECT_FALSE(train(data, nullptr, cfg, 4) == a);
}

TEST(Train, LearnsAlwaysCorrectMember) {
  const auto log = oracle_member_log(400, 5);
  const auto data = build_fusion_dataset(log, 0b111, 4);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.seed = 1;
  const double before = initial_loss(data, cfg, 4);
  const auto model = train(data, nullptr, cfg, 4);
  EXPECT_LT(model.metadata.train_loss.back(), before);
  std::size_t correct = 0;
  for (const auto& r : log) correct += predict(model, r, 0b111).choice == r.label_choice;
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(log.size()), 0.99);
}

TEST(Train, NoSignalSettlesAtLogM) {
  std::vector<EpisodeRecord> log;
  for (std::size_t k = 0; k < 200; ++k) {
    log.push_back(mcq("e" + std::to_string(k), k % 4, {{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}}));
  }
  const auto data = build_fusion_dataset(log, 0b11, 4);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.hidden = {16};
  cfg.learning_rate = 1e-2;
  const auto model = train(data, &data, cfg, 4);
  EXPECT_NEAR(model.metadata.train_loss.back(), std::log(4.0), 0.01);
  EXPECT_EQ(model.metadata.validation_loss.size(), model.metadata.epochs_run);
}

TEST(Train, EarlyStoppingAndConfigChecks) {
  const auto log = oracle_member_log(80, 8);
  const auto train_set = build_fusion_dataset(log, 0b111, 4);
  // Validation labels shuffled away from the truth: its loss eventually rises.
  auto noisy = log;
  for (std::size_t k = 0; k < noisy.size(); ++k) noisy[k].label_choice = (noisy[k].label_choice + 1) % 4;
  const auto val = build_fusion_dataset(noisy, 0b111, 4);
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.hidden = {8};
  cfg.learning_rate = 1e-2;
  cfg.early_stop_patience = 3;
  const auto model = train(train_set, &val, cfg, 4);
  EXPECT_LT(model.metadata.epochs_run, 300u);
  TrainConfig bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(train(train_set, nullptr, bad, 4), ValidationError);
  bad = {};
  bad.learning_rate = 1e300;
  bad.optimizer = Optimizer::SGD;
  bad.epochs = 3;
  EXPECT_THROW(train(train_set, nullptr, bad, 4), NumericalError);
}

TEST(Predict, MaskedArgmaxIgnoresPadding) {
  Eigen::VectorXd d(4);
  d << 0.1, 0.2, 0.3, 0.4;
  EXPECT_EQ(masked_argmax(d, 3), 2u);
  EXPECT_EQ(masked_argmax(d, 4), 3u);
  EXPECT_THROW(masked_argmax(d, 5), ValidationError);
  EXPECT_THROW(masked_argmax(d, 0), ValidationError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto log = oracle_member_log(50, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.hidden = {7};
  const auto model = train(build_fusion_dataset(log, 0b011, 4), nullptr, cfg, 4, {"m0", "m1"});
  const auto text = to_json(model).dump();
  const auto back = fusion_model_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(back, model);
  EXPECT_EQ(back.metadata.train_loss, model.metadata.train_loss);
  for (const auto& r : log) EXPECT_EQ(predict(back, r, 0b011).distribution, predict(model, r, 0b011).distribution);
  auto j = to_json(model);
  j["format"] = "other/2";
  EXPECT_THROW(fusion_model_from_json(j), ValidationError);
  j = to_json(model);
  j["layers"][0]["weights"].erase(0);
  EXPECT_THROW(fusion_model_from_json(j), ValidationError);
  EXPECT_THROW(fusion_model_from_json(nlohmann::json::object()), ValidationError);
}
