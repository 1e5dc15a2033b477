#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/rng.hpp"
#include "arden/tensor.hpp"

namespace arden::train {

// Sub-stream identifiers for derive_seed().
inline constexpr std::uint64_t kShuffleStream = 1;
inline constexpr std::uint64_t kNoiseStream = 2;

struct SgdConfig {
  float learning_rate = 0.0015f;
  std::size_t batch_size = 128;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
};

inline void validate(const SgdConfig& c) {
  if (!(c.learning_rate > 0.0f)) throw ConfigError("learning rate must be positive");
  if (c.batch_size == 0) throw ConfigError("batch size must be positive");
}

// Visiting order for one epoch. Both trainers draw from the same shuffle
// stream so that their batches coincide under equal seeds.
inline std::vector<std::size_t> epoch_order(Rng& rng, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  return order;
}

inline void check_training_set(std::span<const Tensor> inputs,
                               std::span<const std::size_t> labels) {
  if (inputs.empty()) throw DataError("training set is empty");
  if (inputs.size() != labels.size()) {
    throw DataError("input count " + std::to_string(inputs.size()) +
                    " differs from label count " + std::to_string(labels.size()));
  }
}

// Conventional mini-batch SGD on cross-entropy. Returns mean loss per epoch.
inline std::vector<double> train_clean(ad::Network& net, std::span<const Tensor> inputs,
                                       std::span<const std::size_t> labels,
                                       const SgdConfig& config) {
  validate(config);
  check_training_set(inputs, labels);
  Rng shuffle(derive_seed(config.seed, kShuffleStream));
  std::vector<double> losses;
  ad::Tape tape;
  net.zero_grads();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(shuffle, inputs.size());
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        net.forward(inputs[i], tape);
        total += ad::attach_cross_entropy(tape, labels[i]);
        net.backward(tape, Tensor::scalar(1.0f));
      }
      net.sgd_step(config.learning_rate, end - start);
    }
    losses.push_back(total / static_cast<double>(inputs.size()));
  }
  return losses;
}

inline double accuracy(const ad::Network& net, std::span<const Tensor> inputs,
                       std::span<const std::size_t> labels) {
  if (inputs.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (argmax(net.forward(inputs[i])) == labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(inputs.size());
}

}  // namespace arden::train
