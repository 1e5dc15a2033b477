#pragma once

// Cloud-side noisy training. For every sample the joint loss
//
//   L = lambda * L1(x_r) + (1 - lambda) * (L2(x~_r) + L3(x~_r + r))
//
// combines the clean representation, a Laplace-noised copy, and the noised
// copy pushed by r = eta * g / |g|_2 along g = dL2/dx~_r. Parameter
// gradients are summed over the batch and applied as one averaged SGD step.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/dp_transform.hpp"
#include "arden/error.hpp"
#include "arden/rng.hpp"
#include "arden/sgd.hpp"
#include "arden/tensor.hpp"

namespace arden::noisy {

struct NoisyTrainConfig {
  double lambda = 0.2;
  double eta = 5.0;
  double sigma = 1.0;  // noise scale parameter; Laplace scale is bound / sigma
  double bound = 5.0;
  std::size_t batch_size = 128;
  float learning_rate = 0.0015f;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;

  double laplace_scale() const { return bound / sigma; }

  // Config whose Laplace scale is exactly the diversity b.
  static NoisyTrainConfig for_diversity(double b, double bound) {
    NoisyTrainConfig c;
    c.bound = bound;
    c.sigma = bound / b;
    return c;
  }
};

inline void validate(const NoisyTrainConfig& c) {
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
  if (!(c.eta > 0.0)) throw ConfigError("eta must be positive");
  if (!(c.sigma > 0.0) || !(c.bound > 0.0)) throw ConfigError("sigma and B must be positive");
  if (c.batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (!(c.learning_rate > 0.0f)) throw ConfigError("learning rate must be positive");
}

struct LossBreakdown {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double joint = 0.0;
};

struct NoiseHooks {
  bool suppress_noise = false;
};

inline Tensor perturb_representation(const Tensor& x_r, double bound, double sigma, Rng& rng,
                                     NoiseHooks hooks = {}) {
  if (!(bound > 0.0) || !(sigma > 0.0)) throw ConfigError("B and sigma must be positive");
  if (hooks.suppress_noise) return x_r;
  return x_r + dp::sample_laplace(x_r.shape(), bound / sigma, rng);
}

inline Tensor perturb_representation(const Tensor& x_r, double bound, double sigma,
                                     std::uint64_t seed, NoiseHooks hooks = {}) {
  Rng rng(seed);
  return perturb_representation(x_r, bound, sigma, rng, hooks);
}

// Below this gradient norm the maximizing direction is undefined; r = 0.
inline constexpr double kMinGradientNorm = 1e-12;

inline Tensor worst_perturbation(const Tensor& g, double eta) {
  const double norm = l2_norm(g);
  Tensor r(g.shape());
  if (norm < kMinGradientNorm) return r;
  const double s = eta / norm;
  for (std::size_t i = 0; i < g.size(); ++i) r[i] = static_cast<float>(g[i] * s);
  return r;
}

inline double joint_loss(double lambda, double l1, double l2, double l3) {
  return lambda * l1 + (1.0 - lambda) * (l2 + l3);
}

// One batch of noisy training; returns per-sample mean losses. Noise is drawn
// from `noise_rng`. r is held constant when back-propagating L3.
inline LossBreakdown train_batch(ad::Network& cloud, std::span<const Tensor* const> inputs,
                                 std::span<const std::size_t> labels, const NoisyTrainConfig& config,
                                 Rng& noise_rng, NoiseHooks hooks = {}) {
  validate(config);
  if (inputs.empty()) throw UsageError("train_batch called with an empty batch");
  if (inputs.size() != labels.size()) throw UsageError("batch inputs and labels differ in length");
  const std::size_t classes = shape_size(cloud.output_shape());
  for (std::size_t y : labels) {
    if (y >= classes) {
      throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                      " classes");
    }
  }
  const float clean_w = static_cast<float>(config.lambda);
  const float noisy_w = static_cast<float>(1.0 - config.lambda);
  LossBreakdown sum;
  ad::Tape tape;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& x_r = *inputs[i];
    const std::size_t y = labels[i];

    cloud.forward(x_r, tape);
    const double l1 = ad::attach_cross_entropy(tape, y);
    if (clean_w > 0.0f) cloud.backward(tape, Tensor::scalar(clean_w));

    const Tensor x_noisy = perturb_representation(x_r, config.bound, config.sigma, noise_rng, hooks);
    cloud.forward(x_noisy, tape);
    const double l2 = ad::attach_cross_entropy(tape, y);
    // With a zero noisy weight only the direction of g is needed.
    const Tensor g = noisy_w > 0.0f ? cloud.backward(tape, Tensor::scalar(noisy_w))
                                    : cloud.backward(tape, Tensor::scalar(1.0f), false);
    const Tensor r = worst_perturbation(g, config.eta);

    cloud.forward(x_noisy + r, tape);
    const double l3 = ad::attach_cross_entropy(tape, y);
    if (noisy_w > 0.0f) cloud.backward(tape, Tensor::scalar(noisy_w));

    sum.l1 += l1;
    sum.l2 += l2;
    sum.l3 += l3;
  }
  cloud.sgd_step(config.learning_rate, inputs.size());
  const double n = static_cast<double>(inputs.size());
  LossBreakdown mean{sum.l1 / n, sum.l2 / n, sum.l3 / n, 0.0};
  mean.joint = joint_loss(config.lambda, mean.l1, mean.l2, mean.l3);
  return mean;
}

struct EpochLog {
  std::size_t epoch = 0;
  LossBreakdown loss;
  double clean_acc = std::numeric_limits<double>::quiet_NaN();
  double perturbed_acc = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kEpochCsvHeader = "epoch,L1,L2,L3,joint,clean_acc,perturbed_acc";

inline std::string to_csv_row(const EpochLog& e) {
  std::ostringstream os;
  os << std::setprecision(9) << e.epoch << ',' << e.loss.l1 << ',' << e.loss.l2 << ',' << e.loss.l3
     << ',' << e.loss.joint << ',' << e.clean_acc << ',' << e.perturbed_acc;
  return os.str();
}

// Called after every epoch with the model; returns (clean, perturbed) accuracy.
using EpochEvaluator = std::function<std::pair<double, double>(const ad::Network&)>;

// Full training run over shuffled batches. The shuffle stream matches
// train::train_clean, so lambda = 1 reproduces conventional SGD.
inline std::vector<EpochLog> train(ad::Network& cloud, std::span<const Tensor> inputs,
                                   std::span<const std::size_t> labels, const NoisyTrainConfig& config,
                                   const EpochEvaluator& evaluate = {}, NoiseHooks hooks = {}) {
  validate(config);
  train::check_training_set(inputs, labels);
  Rng shuffle(derive_seed(config.seed, train::kShuffleStream));
  Rng noise(derive_seed(config.seed, train::kNoiseStream));
  cloud.zero_grads();
  std::vector<EpochLog> log;
  std::vector<const Tensor*> batch;
  std::vector<std::size_t> batch_labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = train::epoch_order(shuffle, inputs.size());
    LossBreakdown total;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      batch_labels.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back(&inputs[order[k]]);
        batch_labels.push_back(labels[order[k]]);
      }
      const LossBreakdown b = train_batch(cloud, batch, batch_labels, config, noise, hooks);
      const double w = static_cast<double>(end - start);
      total.l1 += b.l1 * w;
      total.l2 += b.l2 * w;
      total.l3 += b.l3 * w;
    }
    const double n = static_cast<double>(inputs.size());
    EpochLog e;
    e.epoch = epoch + 1;
    e.loss = {total.l1 / n, total.l2 / n, total.l3 / n, 0.0};
    e.loss.joint = joint_loss(config.lambda, e.loss.l1, e.loss.l2, e.loss.l3);
    if (evaluate) std::tie(e.clean_acc, e.perturbed_acc) = evaluate(cloud);
    log.push_back(e);
  }
  return log;
}

}  // namespace arden::noisy
