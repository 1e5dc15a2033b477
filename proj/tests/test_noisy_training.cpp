#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "arden/model_zoo.hpp"
#include "arden/noisy_training.hpp"
#include "arden/sgd.hpp"
#include "reference_sgd.hpp"

using namespace arden;

namespace {

Tensor uniform_tensor(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor t(s);
  for (float& v : t.data()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return t;
}

struct Toy {
  std::vector<Tensor> x;
  std::vector<std::size_t> y;
};

// Two gaussian-ish blobs per class in a 16x2x2 representation space.
Toy toy_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Toy t;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 10;
    Tensor v = uniform_tensor({16, 2, 2}, rng, 0.0, 0.3);
    for (std::size_t k = 0; k < 6; ++k) v[(label * 6 + k) % v.size()] += 0.8f;
    t.x.push_back(std::move(v));
    t.y.push_back(label);
  }
  return t;
}

ad::Network toy_cloud(std::uint64_t seed) {
  ad::Network net({16, 2, 2}, {ad::Dense(64, 24), ad::Relu{}, ad::Dense(24, 10), ad::SoftmaxXent{}});
  Rng rng(seed);
  ad::init_glorot(net.layers(), rng);
  return net;
}

double loss_at(const ad::Network& net, const Tensor& x, std::size_t y) {
  ad::Tape tape;
  net.forward(x, tape);
  return ad::attach_cross_entropy(tape, y);
}

Tensor input_grad(ad::Network& net, const Tensor& x, std::size_t y) {
  ad::Tape tape;
  net.forward(x, tape);
  ad::attach_cross_entropy(tape, y);
  return net.backward(tape, Tensor::scalar(1.0f), false);
}

}  // namespace

TEST(Perturb, ZeroNoiseHook) {
  const Tensor x = Tensor::vector({1, 2, 3});
  EXPECT_TRUE(bit_equal(noisy::perturb_representation(x, 1.0, 0.5, 3, {true}), x));
}

TEST(Perturb, SameSeedSameNoise) {
  const Tensor x({4, 4});
  EXPECT_TRUE(bit_equal(noisy::perturb_representation(x, 2.0, 0.5, 3), noisy::perturb_representation(x, 2.0, 0.5, 3)));
  EXPECT_THROW(noisy::perturb_representation(x, 0.0, 0.5, 3), ConfigError);
  EXPECT_THROW(noisy::perturb_representation(x, 1.0, 0.0, 3), ConfigError);
}

TEST(Perturb, MonteCarloMean) {
  const double bound = 1.5, sigma = 0.6, scale = bound / sigma;
  const Tensor x({1000, 1000}, 0.25f);
  const Tensor p = noisy::perturb_representation(x, bound, sigma, 41);
  double sum = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum += p[i] - x[i];
    abs_sum += std::fabs(p[i] - x[i]);
  }
  const double n = static_cast<double>(p.size());
  EXPECT_NEAR(sum / n, 0.0, 3.0 * scale / 1000.0);
  EXPECT_NEAR(abs_sum / n, scale, 0.01 * scale);  // Laplace scale is B / sigma
}

TEST(WorstPerturbation, Examples) {
  const Tensor r = noisy::worst_perturbation(Tensor::vector({3, 4}), 5.0);
  EXPECT_FLOAT_EQ(r[0], 3.0f);
  EXPECT_FLOAT_EQ(r[1], 4.0f);
  EXPECT_EQ(max_abs(noisy::worst_perturbation(Tensor({7}), 5.0)), 0.0);
  EXPECT_EQ(max_abs(noisy::worst_perturbation(Tensor({2}, 1e-14f), 5.0)), 0.0);
}

TEST(WorstPerturbation, NormInvariant) {
  Rng rng(2);
  for (int t = 0; t < 2000; ++t) {
    const double mag = std::pow(10.0, -8.0 + 12.0 * rng.uniform());
    const Tensor g = uniform_tensor({1 + rng.below(300)}, rng, -mag, mag);
    const double eta = std::pow(10.0, -3.0 + 5.0 * rng.uniform());
    const Tensor r = noisy::worst_perturbation(g, eta);
    if (l2_norm(g) < noisy::kMinGradientNorm) continue;
    ASSERT_LE(std::fabs(l2_norm(r) - eta), 1e-5 * eta);
  }
}

TEST(JointLoss, Examples) {
  EXPECT_EQ(noisy::joint_loss(1.0, 1.5, 7.0, 9.0), 1.5);
  EXPECT_EQ(noisy::joint_loss(0.0, 1.5, 2.0, 3.0), 5.0);
  EXPECT_NEAR(noisy::joint_loss(0.2, 1.0, 2.0, 3.0), 4.2, 1e-15);
}

TEST(JointLoss, NonNegativeComponents) {
  const Toy data = toy_set(40, 3);
  ad::Network net = toy_cloud(4);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(0.5, 1.0);
  cfg.batch_size = 8;
  Rng noise(5);
  std::vector<const Tensor*> batch;
  for (auto& x : data.x) batch.push_back(&x);
  for (int i = 0; i < 5; ++i) {
    const auto l = noisy::train_batch(net, batch, data.y, cfg, noise);
    EXPECT_GE(l.l1, 0.0);
    EXPECT_GE(l.l2, 0.0);
    EXPECT_GE(l.l3, 0.0);
    EXPECT_DOUBLE_EQ(l.joint, noisy::joint_loss(cfg.lambda, l.l1, l.l2, l.l3));
  }
}

TEST(FirstOrder, GradientDirectionMaximizesIncrease) {
  Rng rng(6);
  const double eta = 1e-3, tol = 1e-4;
  for (int t = 0; t < 20; ++t) {
    ad::Network net = toy_cloud(100 + t);
    const Tensor x = uniform_tensor({16, 2, 2}, rng, -2.0, 2.0);
    const std::size_t y = rng.below(10);
    const Tensor g = input_grad(net, x, y);
    const Tensor r = noisy::worst_perturbation(g, eta);
    const double base = loss_at(net, x, y);
    const double best = loss_at(net, x + r, y) - base;
    for (int d = 0; d < 50; ++d) {
      Tensor dir = uniform_tensor(x.shape(), rng, -1.0, 1.0);
      const Tensor rp = noisy::worst_perturbation(dir, eta);  // random unit direction times eta
      ASSERT_GE(best, loss_at(net, x + rp, y) - base - tol);
    }
    EXPECT_GT(best, 0.0);
  }
}

TEST(TrainBatch, LambdaOneMatchesReferenceStep) {
  const Toy data = toy_set(37, 7);
  ad::Network a = toy_cloud(8), b = toy_cloud(8);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(2.0, 1.0);
  cfg.lambda = 1.0;
  cfg.learning_rate = 0.05f;
  cfg.batch_size = 37;
  cfg.epochs = 1;
  Rng noise(9);
  std::vector<const Tensor*> batch;
  for (auto& x : data.x) batch.push_back(&x);
  noisy::train_batch(a, batch, data.y, cfg, noise);

  // One batch of the reference visiting samples in stored order.
  for (std::size_t k = 0; k < data.x.size(); ++k) {
    ad::Tape tape;
    b.forward(data.x[k], tape);
    ad::attach_cross_entropy(tape, data.y[k]);
    b.backward(tape, Tensor::scalar(1.0f));
  }
  b.sgd_step(0.05f, data.x.size());
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
}

TEST(TrainBatch, ZeroNoiseCollapsesL2ToL1) {
  const Toy data = toy_set(1, 10);
  ad::Network net = toy_cloud(11);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(1.0, 1.0);
  cfg.lambda = 0.5;
  cfg.eta = 0.3;
  const double l1 = loss_at(net, data.x[0], data.y[0]);
  const Tensor r = noisy::worst_perturbation(input_grad(net, data.x[0], data.y[0]), cfg.eta);
  const double l3 = loss_at(net, data.x[0] + r, data.y[0]);
  Rng noise(1);
  std::vector<const Tensor*> batch{&data.x[0]};
  const auto l = noisy::train_batch(net, batch, data.y, cfg, noise, {true});
  EXPECT_EQ(l.l1, l1);
  EXPECT_EQ(l.l2, l.l1);
  EXPECT_EQ(l.l3, l3);
  EXPECT_DOUBLE_EQ(l.joint, 0.5 * l1 + 0.5 * (l1 + l3));
}

TEST(TrainBatch, FreshClassifierLossIsLnTen) {
  Rng rng(12);
  ad::Network net = zoo::instantiate(zoo::build_architecture("cloud-small"), 13);
  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
  for (int i = 0; i < 20; ++i) {
    xs.push_back(uniform_tensor({16, 14, 14}, rng, 0.0, 0.01));
    ys.push_back(rng.below(10));
  }
  std::vector<const Tensor*> batch;
  for (auto& x : xs) batch.push_back(&x);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(1e-3, 1.0);
  cfg.eta = 1e-3;
  Rng noise(14);
  const auto l = noisy::train_batch(net, batch, ys, cfg, noise);
  EXPECT_NEAR(l.l1, std::log(10.0), 0.02);
  EXPECT_NEAR(l.l2, std::log(10.0), 0.02);
  EXPECT_NEAR(l.l3, std::log(10.0), 0.02);
}

TEST(TrainBatch, Errors) {
  const Toy data = toy_set(2, 15);
  ad::Network net = toy_cloud(16);
  Rng noise(1);
  noisy::NoisyTrainConfig cfg;
  std::vector<const Tensor*> batch{&data.x[0], &data.x[1]};
  EXPECT_THROW(noisy::train_batch(net, {}, {}, cfg, noise), UsageError);
  const std::vector<std::size_t> bad{1, 10};
  EXPECT_THROW(noisy::train_batch(net, batch, bad, cfg, noise), DataError);

  for (auto mutate : std::vector<void (*)(noisy::NoisyTrainConfig&)>{
           [](noisy::NoisyTrainConfig& c) { c.lambda = 1.5; }, [](noisy::NoisyTrainConfig& c) { c.eta = 0; },
           [](noisy::NoisyTrainConfig& c) { c.sigma = 0; }, [](noisy::NoisyTrainConfig& c) { c.batch_size = 0; },
           [](noisy::NoisyTrainConfig& c) { c.learning_rate = 0; }}) {
    noisy::NoisyTrainConfig c;
    mutate(c);
    EXPECT_THROW(noisy::train_batch(net, batch, data.y, c, noise), ConfigError);
  }
}

TEST(Train, LambdaOneMatchesReferenceTrainer) {
  const Toy data = toy_set(203, 17);
  ad::Network a = toy_cloud(18), b = toy_cloud(18), c = toy_cloud(18);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(5.0, 0.9);
  cfg.lambda = 1.0;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.02f;
  cfg.epochs = 2;
  cfg.seed = 19;
  noisy::train(a, data.x, data.y, cfg);
  arden::testing::reference_sgd(b, data.x, data.y, cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.seed);
  train::train_clean(c, data.x, data.y, {cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.seed});
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(c.fingerprint(), b.fingerprint());
}

TEST(Train, DeterministicAndLogged) {
  const Toy data = toy_set(120, 20);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(0.5, 1.0);
  cfg.batch_size = 10;
  cfg.learning_rate = 0.05f;
  cfg.epochs = 5;
  cfg.seed = 21;
  ad::Network a = toy_cloud(22), b = toy_cloud(22);
  std::size_t calls = 0;
  const auto la = noisy::train(a, data.x, data.y, cfg, [&](const ad::Network& net) {
    ++calls;
    return std::pair<double, double>(train::accuracy(net, data.x, data.y), 0.0);
  });
  const auto lb = noisy::train(b, data.x, data.y, cfg);
  EXPECT_EQ(calls, 5u);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  ASSERT_EQ(la.size(), 5u);
  for (std::size_t e = 0; e < 5; ++e) {
    EXPECT_EQ(la[e].epoch, e + 1);
    EXPECT_EQ(la[e].loss.joint, lb[e].loss.joint);
  }
  EXPECT_LT(la.back().loss.joint, la.front().loss.joint);
  EXPECT_GT(la.back().clean_acc, 0.5);

  const std::string row = noisy::to_csv_row(la[0]);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 6);
  EXPECT_EQ(std::string(noisy::kEpochCsvHeader), "epoch,L1,L2,L3,joint,clean_acc,perturbed_acc");
  EXPECT_THROW(noisy::train(a, {}, {}, cfg), DataError);
}

TEST(Train, RobustnessImprovesOnNoisyInputs) {
  // On the toy task, noisy training should beat clean training on noised inputs.
  const Toy tr = toy_set(400, 23), te = toy_set(400, 24);
  auto cfg = noisy::NoisyTrainConfig::for_diversity(0.6, 1.0);
  cfg.eta = 0.5;  // scaled to the 64-dim toy representation
  cfg.batch_size = 10;
  cfg.learning_rate = 0.05f;
  cfg.epochs = 8;
  cfg.seed = 25;
  ad::Network robust = toy_cloud(26), clean = toy_cloud(26);
  noisy::train(robust, tr.x, tr.y, cfg);
  auto clean_cfg = cfg;
  clean_cfg.lambda = 1.0;
  noisy::train(clean, tr.x, tr.y, clean_cfg);
  Rng rng(27);
  std::size_t hr = 0, hc = 0;
  double lr_sum = 0.0, lc_sum = 0.0;
  for (std::size_t i = 0; i < te.x.size(); ++i) {
    const Tensor xn = noisy::perturb_representation(te.x[i], cfg.bound, cfg.sigma, rng);
    hr += argmax(robust.forward(xn)) == te.y[i];
    hc += argmax(clean.forward(xn)) == te.y[i];
    lr_sum += loss_at(robust, xn, te.y[i]);
    lc_sum += loss_at(clean, xn, te.y[i]);
  }
  EXPECT_GT(hr, hc);
  EXPECT_LT(lr_sum, lc_sum);
}
