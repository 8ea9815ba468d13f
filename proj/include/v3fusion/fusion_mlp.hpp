#pragma once

// MLP fusion head: concatenated member choice distributions -> fused distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "v3fusion/common.hpp"
#include "v3fusion/records.hpp"

namespace v3fusion {

enum class Activation { ReLU, Sigmoid };

inline std::string_view to_string(Activation a) { return a == Activation::ReLU ? "relu" : "sigmoid"; }

inline Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::ReLU;
  if (text == "sigmoid") return Activation::Sigmoid;
  throw ValidationError("unknown activation '" + std::string(text) + "'");
}

enum class Optimizer { SGD, Adam };

inline std::string_view to_string(Optimizer o) { return o == Optimizer::SGD ? "sgd" : "adam"; }

inline Optimizer parse_optimizer(std::string_view text) {
  if (text == "sgd") return Optimizer::SGD;
  if (text == "adam") return Optimizer::Adam;
  throw ValidationError("unknown optimizer '" + std::string(text) + "'");
}

struct TrainingMetadata {
  std::size_t epochs_run = 0;
  std::uint64_t seed = 0;
  std::string optimizer;
  std::vector<double> train_loss;  // mean loss per epoch, evaluated after the epoch
  std::vector<double> validation_loss;
};

/// Fully connected layers; weights[l] is (out x in). Hidden layers use
/// `activation`, the last layer feeds a softmax.
struct FusionModel {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  Activation activation = Activation::ReLU;
  std::vector<std::string> members;  // ensemble model ids, manifest order
  std::size_t m_max = 0;
  TrainingMetadata metadata;

  Eigen::Index input_width() const { return weights.front().cols(); }
  Eigen::Index output_width() const { return weights.back().rows(); }
  std::size_t layers() const { return weights.size(); }

  std::size_t parameter_count() const {
    std::size_t count = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) count += weights[l].size() + biases[l].size();
    return count;
  }

  bool operator==(const FusionModel& other) const {
    if (weights.size() != other.weights.size()) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l] != other.weights[l] || biases[l] != other.biases[l]) return false;
    }
    return activation == other.activation && members == other.members && m_max == other.m_max;
  }
};

/// Zero-initialized model with layer widths [input, hidden..., output].
inline FusionModel make_fusion_model(std::size_t input, const std::vector<std::size_t>& hidden,
                                     std::size_t output, Activation activation = Activation::ReLU) {
  if (input == 0 || output < 2) throw ValidationError("fusion model needs input >= 1 and output >= 2");
  FusionModel model;
  model.activation = activation;
  model.m_max = output;
  std::vector<std::size_t> widths{input};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l + 1] == 0) throw ValidationError("zero-width layer");
    model.weights.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(widths[l + 1]),
                                                  static_cast<Eigen::Index>(widths[l])));
    model.biases.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(widths[l + 1])));
  }
  return model;
}

/// Glorot/Xavier uniform weights, zero biases.
inline void xavier_init(FusionModel& model, std::mt19937_64& rng) {
  for (std::size_t l = 0; l < model.layers(); ++l) {
    auto& w = model.weights[l];
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
    }
    model.biases[l].setZero();
  }
}

// ---------------------------------------------------------------------------
// Features.

/// Member distributions zero-padded to m_max and concatenated in manifest order.
inline Eigen::VectorXd assemble_features(const EpisodeRecord& record, TeamMask team, std::size_t m_max) {
  if (record.task_kind != TaskKind::MCQ) throw ValidationError("fusion features need an MCQ record");
  if (record.num_choices > m_max) {
    throw ValidationError("episode " + record.episode_id + " has " + std::to_string(record.num_choices) +
                          " choices, more than m_max " + std::to_string(m_max));
  }
  const auto members = team_members(team);
  Eigen::VectorXd features = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(members.size() * m_max));
  for (std::size_t s = 0; s < members.size(); ++s) {
    if (members[s] >= record.outputs.size()) throw ValidationError("team member outside the pool");
    const auto& probs = record.outputs[members[s]].choice_probs;
    if (probs.size() > m_max) throw ValidationError("choice_probs longer than m_max");
    for (std::size_t c = 0; c < probs.size(); ++c) {
      features(static_cast<Eigen::Index>(s * m_max + c)) = probs[c];
    }
  }
  return features;
}

struct FusionDataset {
  Eigen::MatrixXd features;  // rows = episodes
  std::vector<std::size_t> labels;
  std::vector<std::size_t> num_choices;

  std::size_t size() const { return labels.size(); }
};

inline FusionDataset build_fusion_dataset(const std::vector<EpisodeRecord>& records, TeamMask team,
                                          std::size_t m_max) {
  FusionDataset data;
  const auto width = static_cast<Eigen::Index>(std::popcount(team) * m_max);
  data.features.resize(static_cast<Eigen::Index>(records.size()), width);
  for (std::size_t k = 0; k < records.size(); ++k) {
    data.features.row(static_cast<Eigen::Index>(k)) = assemble_features(records[k], team, m_max).transpose();
    data.labels.push_back(records[k].label_choice);
    data.num_choices.push_back(records[k].num_choices);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Forward / backward.

namespace detail {

inline Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::ReLU) return z.cwiseMax(0.0);
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

/// d activation / d z expressed through z and the activation output.
inline Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& z, const Eigen::MatrixXd& out, Activation a) {
  if (a == Activation::ReLU) return (z.array() > 0.0).cast<double>().matrix();
  return (out.array() * (1.0 - out.array())).matrix();
}

/// Row-wise softmax of logits (batch x classes).
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double peak = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;   // z_l, batch x width
  std::vector<Eigen::MatrixXd> post;  // a_l; post[0] is the input
  Eigen::MatrixXd logits;
};

inline ForwardCache forward_batch(const FusionModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.input_width()) {
    throw ValidationError("feature width " + std::to_string(x.cols()) + " does not match model input " +
                          std::to_string(model.input_width()));
  }
  ForwardCache cache;
  cache.post.push_back(x);
  for (std::size_t l = 0; l < model.layers(); ++l) {
    Eigen::MatrixXd z = cache.post.back() * model.weights[l].transpose();
    z.rowwise() += model.biases[l].transpose();
    if (l + 1 == model.layers()) {
      cache.logits = std::move(z);
    } else {
      cache.post.push_back(activate(z, model.activation));
      cache.pre.push_back(std::move(z));
    }
  }
  return cache;
}

/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
inline double cross_entropy(const Eigen::MatrixXd& logits, std::span<const std::size_t> labels) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    const double log_z = peak + std::log((logits.row(r).array() - peak).exp().sum());
    total += log_z - logits(r, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(r)]));
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace detail

/// Fused distribution for one feature vector.
inline Eigen::VectorXd forward(const FusionModel& model, const Eigen::VectorXd& features) {
  const auto cache = detail::forward_batch(model, features.transpose());
  return detail::softmax_rows(cache.logits).row(0).transpose();
}

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  double loss = 0.0;
};

/// Mean cross-entropy loss over the batch and its exact gradient.
inline Gradients backprop(const FusionModel& model, const Eigen::MatrixXd& x, std::span<const std::size_t> labels) {
  if (static_cast<std::size_t>(x.rows()) != labels.size() || labels.empty()) {
    throw ValidationError("batch features and labels disagree");
  }
  for (auto y : labels) {
    if (y >= static_cast<std::size_t>(model.output_width())) throw ValidationError("label outside output width");
  }
  const auto cache = detail::forward_batch(model, x);
  const double batch = static_cast<double>(x.rows());
  Gradients g;
  g.loss = detail::cross_entropy(cache.logits, labels);
  g.weights.resize(model.layers());
  g.biases.resize(model.layers());

  Eigen::MatrixXd delta = detail::softmax_rows(cache.logits);
  for (std::size_t r = 0; r < labels.size(); ++r) delta(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(labels[r])) -= 1.0;
  delta /= batch;
  for (std::size_t l = model.layers(); l-- > 0;) {
    g.weights[l] = delta.transpose() * cache.post[l];
    g.biases[l] = delta.colwise().sum().transpose();
    if (l == 0) break;
    const Eigen::MatrixXd upstream = delta * model.weights[l];
    delta = upstream.cwiseProduct(detail::activation_grad(cache.pre[l - 1], cache.post[l], model.activation));
  }
  return g;
}

inline double batch_loss(const FusionModel& model, const Eigen::MatrixXd& x, std::span<const std::size_t> labels) {
  return detail::cross_entropy(detail::forward_batch(model, x).logits, labels);
}

/// Largest relative error between the analytic gradient and central finite
/// differences over every parameter. `tamper` lets tests corrupt the analytic side.
inline double gradient_check(const FusionModel& model, const Eigen::MatrixXd& x, std::span<const std::size_t> labels,
                             double step = 1e-5, const std::function<void(Gradients&)>& tamper = {}) {
  Gradients analytic = backprop(model, x, labels);
  if (tamper) tamper(analytic);
  FusionModel probe = model;
  double worst = 0.0;
  auto compare = [&](double& param, double grad) {
    const double saved = param;
    param = saved + step;
    const double up = batch_loss(probe, x, labels);
    param = saved - step;
    const double down = batch_loss(probe, x, labels);
    param = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(grad) + std::abs(numeric), 1e-4});
    worst = std::max(worst, std::abs(grad - numeric) / denom);
  };
  for (std::size_t l = 0; l < probe.layers(); ++l) {
    for (Eigen::Index i = 0; i < probe.weights[l].size(); ++i) {
      compare(probe.weights[l].data()[i], analytic.weights[l].data()[i]);
    }
    for (Eigen::Index i = 0; i < probe.biases[l].size(); ++i) {
      compare(probe.biases[l].data()[i], analytic.biases[l].data()[i]);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  std::size_t epochs = 500;
  Optimizer optimizer = Optimizer::Adam;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::optional<std::size_t> early_stop_patience;  // epochs without validation improvement
  std::vector<std::size_t> hidden = {100, 100};
  Activation activation = Activation::ReLU;

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  }
};

namespace detail {

class AdamState {
 public:
  explicit AdamState(const FusionModel& model) {
    for (std::size_t l = 0; l < model.layers(); ++l) {
      m_w_.push_back(Eigen::MatrixXd::Zero(model.weights[l].rows(), model.weights[l].cols()));
      v_w_.push_back(m_w_.back());
      m_b_.push_back(Eigen::VectorXd::Zero(model.biases[l].size()));
      v_b_.push_back(m_b_.back());
    }
  }

  void step(FusionModel& model, const Gradients& g, double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t l = 0; l < model.layers(); ++l) {
      m_w_[l] = beta1 * m_w_[l] + (1.0 - beta1) * g.weights[l];
      v_w_[l] = beta2 * v_w_[l] + (1.0 - beta2) * g.weights[l].cwiseAbs2();
      model.weights[l].array() -= lr * (m_w_[l].array() / c1) / ((v_w_[l].array() / c2).sqrt() + eps);
      m_b_[l] = beta1 * m_b_[l] + (1.0 - beta1) * g.biases[l];
      v_b_[l] = beta2 * v_b_[l] + (1.0 - beta2) * g.biases[l].cwiseAbs2();
      model.biases[l].array() -= lr * (m_b_[l].array() / c1) / ((v_b_[l].array() / c2).sqrt() + eps);
    }
  }

 private:
  std::vector<Eigen::MatrixXd> m_w_, v_w_;
  std::vector<Eigen::VectorXd> m_b_, v_b_;
  std::uint64_t t_ = 0;
};

}  // namespace detail

/// Minibatch training on the cross-entropy loss. The epoch shuffle and the
/// initialization both come from cfg.seed, so equal inputs give equal weights.
inline FusionModel train(const FusionDataset& train_set, const FusionDataset* validation_set, const TrainConfig& cfg,
                         std::size_t m_max, std::vector<std::string> members = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw ValidationError("training split is empty");
  std::mt19937_64 rng(cfg.seed);
  FusionModel model = make_fusion_model(static_cast<std::size_t>(train_set.features.cols()), cfg.hidden, m_max,
                                        cfg.activation);
  model.members = std::move(members);
  xavier_init(model, rng);
  model.metadata.seed = cfg.seed;
  model.metadata.optimizer = std::string(to_string(cfg.optimizer));

  detail::AdamState adam(model);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Eigen::MatrixXd batch_x;
  std::vector<std::size_t> batch_y;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      batch_x.resize(static_cast<Eigen::Index>(count), train_set.features.cols());
      batch_y.resize(count);
      for (std::size_t b = 0; b < count; ++b) {
        batch_x.row(static_cast<Eigen::Index>(b)) = train_set.features.row(static_cast<Eigen::Index>(order[start + b]));
        batch_y[b] = train_set.labels[order[start + b]];
      }
      const Gradients g = backprop(model, batch_x, batch_y);
      if (!std::isfinite(g.loss)) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch << ", batch starting at " << start
            << " (learning_rate " << cfg.learning_rate << ")";
        throw NumericalError(msg.str());
      }
      if (cfg.optimizer == Optimizer::Adam) {
        adam.step(model, g, cfg.learning_rate);
      } else {
        for (std::size_t l = 0; l < model.layers(); ++l) {
          model.weights[l] -= cfg.learning_rate * g.weights[l];
          model.biases[l] -= cfg.learning_rate * g.biases[l];
        }
      }
    }
    model.metadata.train_loss.push_back(batch_loss(model, train_set.features, train_set.labels));
    ++model.metadata.epochs_run;
    if (validation_set && validation_set->size() > 0) {
      const double v = batch_loss(model, validation_set->features, validation_set->labels);
      model.metadata.validation_loss.push_back(v);
      if (cfg.early_stop_patience) {
        if (v < best_validation) {
          best_validation = v;
          since_best = 0;
        } else if (++since_best >= *cfg.early_stop_patience) {
          break;
        }
      }
    }
  }
  return model;
}

/// Initial loss of a freshly initialized model, for before/after comparisons.
inline double initial_loss(const FusionDataset& data, const TrainConfig& cfg, std::size_t m_max) {
  std::mt19937_64 rng(cfg.seed);
  FusionModel model = make_fusion_model(static_cast<std::size_t>(data.features.cols()), cfg.hidden, m_max,
                                        cfg.activation);
  xavier_init(model, rng);
  return batch_loss(model, data.features, data.labels);
}

struct FusionPrediction {
  std::size_t choice = 0;
  Eigen::VectorXd distribution;  // length m_max
};

/// Argmax over the first `num_choices` entries; padded positions never win.
inline std::size_t masked_argmax(const Eigen::VectorXd& dist, std::size_t num_choices) {
  if (num_choices == 0 || num_choices > static_cast<std::size_t>(dist.size())) {
    throw ValidationError("num_choices outside the fused distribution");
  }
  return argmax(std::span<const double>(dist.data(), num_choices));
}

inline FusionPrediction predict(const FusionModel& model, const EpisodeRecord& record, TeamMask team) {
  FusionPrediction out;
  out.distribution = forward(model, assemble_features(record, team, model.m_max));
  out.choice = masked_argmax(out.distribution, record.num_choices);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint (structured text, format tag "v3fusion-mlp/1").

inline constexpr const char* kCheckpointFormat = "v3fusion-mlp/1";

inline nlohmann::json to_json(const FusionModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < model.layers(); ++l) {
    const auto& w = model.weights[l];
    std::vector<double> row_major;
    row_major.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) row_major.push_back(w(r, c));
    }
    layers.push_back({{"in", w.cols()},
                      {"out", w.rows()},
                      {"weights", row_major},
                      {"bias", std::vector<double>(model.biases[l].data(), model.biases[l].data() + model.biases[l].size())}});
  }
  return {{"format", kCheckpointFormat},
          {"activation", std::string(to_string(model.activation))},
          {"members", model.members},
          {"m_max", model.m_max},
          {"layers", layers},
          {"metadata",
           {{"epochs_run", model.metadata.epochs_run},
            {"seed", model.metadata.seed},
            {"optimizer", model.metadata.optimizer},
            {"train_loss", model.metadata.train_loss},
            {"validation_loss", model.metadata.validation_loss}}}};
}

inline FusionModel fusion_model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw ValidationError("unsupported checkpoint format '" + j.at("format").get<std::string>() + "'");
    }
    FusionModel model;
    model.activation = parse_activation(j.at("activation").get<std::string>());
    model.members = j.at("members").get<std::vector<std::string>>();
    model.m_max = j.at("m_max").get<std::size_t>();
    for (const auto& layer : j.at("layers")) {
      const auto in = layer.at("in").get<Eigen::Index>();
      const auto out = layer.at("out").get<Eigen::Index>();
      const auto w = layer.at("weights").get<std::vector<double>>();
      const auto b = layer.at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != in * out || static_cast<Eigen::Index>(b.size()) != out) {
        throw ValidationError("checkpoint layer shape does not match its data");
      }
      Eigen::MatrixXd weights(out, in);
      for (Eigen::Index r = 0; r < out; ++r) {
        for (Eigen::Index c = 0; c < in; ++c) weights(r, c) = w[static_cast<std::size_t>(r * in + c)];
      }
      if (!weights.allFinite()) throw ValidationError("checkpoint holds non-finite weights");
      if (!model.weights.empty() && model.weights.back().rows() != in) {
        throw ValidationError("checkpoint layers do not chain");
      }
      model.weights.push_back(std::move(weights));
      model.biases.push_back(Eigen::Map<const Eigen::VectorXd>(b.data(), out));
    }
    if (model.weights.empty()) throw ValidationError("checkpoint has no layers");
    if (static_cast<std::size_t>(model.output_width()) != model.m_max) {
      throw ValidationError("checkpoint output width differs from m_max");
    }
    const auto& meta = j.at("metadata");
    model.metadata.epochs_run = meta.at("epochs_run").get<std::size_t>();
    model.metadata.seed = meta.at("seed").get<std::uint64_t>();
    model.metadata.optimizer = meta.at("optimizer").get<std::string>();
    model.metadata.train_loss = meta.at("train_loss").get<std::vector<double>>();
    model.metadata.validation_loss = meta.at("validation_loss").get<std::vector<double>>();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace v3fusion
