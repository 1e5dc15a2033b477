#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/rng.hpp"
#include "gradcheck.hpp"

using namespace arden;
using arden::testing::check_layer;
using arden::testing::random_tensor;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Forward, EmptyLayerListIsIdentity) {
  std::vector<ad::Layer> none;
  const Tensor x({2, 2}, std::vector<float>{1, -2, 3, 4});
  const Tensor y = ad::forward(none, x);
  EXPECT_TRUE(bit_equal(x, y));
}

TEST(Forward, IdentityDense) {
  ad::Dense d(3, 3);
  for (std::size_t i = 0; i < 3; ++i) d.weight.value[i * 3 + i] = 1.0f;
  std::vector<ad::Layer> layers{d};
  const Tensor y = ad::forward(layers, Tensor::vector({1, 2, 3}));
  EXPECT_EQ(values(y), (std::vector<float>{1, 2, 3}));
}

TEST(Forward, Relu) {
  std::vector<ad::Layer> layers{ad::Relu{}};
  EXPECT_EQ(values(ad::forward(layers, Tensor::vector({-1, 0, 2}))), (std::vector<float>{0, 0, 2}));
}

TEST(Forward, ShapeMismatchNamesBothLayers) {
  std::vector<ad::Layer> layers{ad::Dense(4, 3), ad::Relu{}, ad::Dense(5, 2)};
  try {
    ad::forward(layers, Tensor({4}));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("layer 1 (relu)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("layer 2 (dense)"), std::string::npos) << msg;
  }
  std::vector<ad::Layer> first{ad::Dense(4, 3)};
  EXPECT_THROW(ad::forward(first, Tensor({5})), ConfigError);
}

TEST(Forward, Deterministic) {
  Rng rng(3);
  ad::Network net({1, 8, 8}, {ad::Conv2D(1, 4, 3, ad::Padding::kSame), ad::Relu{}, ad::MaxPool2{},
                              ad::Dense(64, 10), ad::SoftmaxXent{}});
  ad::init_glorot(net.layers(), rng);
  const Tensor x = random_tensor({1, 8, 8}, rng);
  EXPECT_TRUE(bit_equal(net.forward(x), net.forward(x)));
  ad::Tape tape;
  EXPECT_TRUE(bit_equal(net.forward(x), net.forward(x, tape)));
}

TEST(Forward, SoftmaxIsDistribution) {
  Rng rng(5);
  std::vector<ad::Layer> layers{ad::SoftmaxXent{}};
  for (int t = 0; t < 200; ++t) {
    const Tensor z = random_tensor({1 + rng.below(12)}, rng, -40.0, 40.0);
    const Tensor p = ad::forward(layers, z);
    double s = 0.0;
    for (float v : p.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Backward, SumLossGivesOnes) {
  std::vector<ad::Layer> none;
  ad::Tape tape;
  const Tensor x({2, 3});
  ad::forward(none, x, tape);
  const Tensor g = ad::backward(none, tape, Tensor(x.shape(), 1.0f));
  EXPECT_EQ(values(g), std::vector<float>(6, 1.0f));

  // Same through an identity dense layer.
  std::vector<ad::Layer> id{ad::Dense(3, 3)};
  auto& d = std::get<ad::Dense>(id[0]);
  for (std::size_t i = 0; i < 3; ++i) d.weight.value[i * 3 + i] = 1.0f;
  ad::forward(id, Tensor::vector({4, 5, 6}), tape);
  EXPECT_EQ(values(ad::backward(id, tape, Tensor({3}, 1.0f))), std::vector<float>(3, 1.0f));
}

TEST(Backward, BilinearForm) {
  std::vector<ad::Layer> layers{ad::Dense(2, 1)};
  auto& d = std::get<ad::Dense>(layers[0]);
  d.weight.value[0] = 2.0f;
  d.weight.value[1] = 3.0f;
  ad::Tape tape;
  ad::forward(layers, Tensor::vector({1, 1}), tape);
  const Tensor gx = ad::backward(layers, tape, Tensor::scalar(1.0f));
  EXPECT_EQ(values(gx), (std::vector<float>{2, 3}));
  EXPECT_EQ(values(d.weight.grad), (std::vector<float>{1, 1}));
  EXPECT_EQ(values(d.bias.grad), (std::vector<float>{1}));
}

TEST(Backward, WithoutTapeIsUsageError) {
  std::vector<ad::Layer> layers{ad::Relu{}};
  ad::Tape tape;
  EXPECT_THROW(ad::backward(layers, tape, Tensor::scalar(1.0f)), UsageError);
  ad::forward(layers, Tensor::vector({1}), tape);
  ad::backward(layers, tape, Tensor::scalar(1.0f));
  // The tape is consumed.
  EXPECT_THROW(ad::backward(layers, tape, Tensor::scalar(1.0f)), UsageError);
}

TEST(Backward, CrossEntropyNeedsFusedTail) {
  std::vector<ad::Layer> layers{ad::Relu{}};
  ad::Tape tape;
  ad::forward(layers, Tensor::vector({1, 2}), tape);
  EXPECT_THROW(ad::attach_cross_entropy(tape, 0), UsageError);

  std::vector<ad::Layer> head{ad::SoftmaxXent{}};
  ad::forward(head, Tensor::vector({1, 2}), tape);
  EXPECT_THROW(ad::attach_cross_entropy(tape, 2), DataError);
}

TEST(Backward, FrozenLayerCollectsNothing) {
  Rng rng(9);
  std::vector<ad::Layer> layers{ad::Dense(3, 4), ad::Relu{}, ad::Dense(4, 2), ad::SoftmaxXent{}};
  ad::init_glorot(layers, rng);
  std::get<ad::Dense>(layers[0]).weight.trainable = false;
  std::get<ad::Dense>(layers[0]).bias.trainable = false;
  ad::Tape tape;
  ad::forward(layers, random_tensor({3}, rng), tape);
  ad::attach_cross_entropy(tape, 1);
  const Tensor gx = ad::backward(layers, tape);
  EXPECT_GT(max_abs(gx), 0.0);
  EXPECT_EQ(max_abs(std::get<ad::Dense>(layers[0]).weight.grad), 0.0);
  EXPECT_GT(max_abs(std::get<ad::Dense>(layers[2]).weight.grad), 0.0);
}

class Primitive : public ::testing::TestWithParam<std::string> {};

TEST_P(Primitive, MatchesFiniteDifferences) {
  const auto s = arden::testing::run_trials(GetParam(), 100, 20240611);
  EXPECT_EQ(s.trials, 100u);
  EXPECT_EQ(s.failed_trials, 0u) << s.detail.first_failure;
  EXPECT_GT(s.detail.checked, 100u);
}

INSTANTIATE_TEST_SUITE_P(All, Primitive, ::testing::ValuesIn(arden::testing::primitive_kinds()),
                         [](const auto& info) {
                           std::string n = info.param;
                           for (char& c : n) {
                             if (c == '-') c = '_';
                           }
                           return n;
                         });

TEST(GradCheck, CatchesAWrongGradient) {
  // The oracle must notice a corrupted weight gradient.
  arden::testing::GradCheckResult r;
  arden::testing::compare(r, 1.0, 1.05, "probe");
  EXPECT_EQ(r.failed, 1u);
  arden::testing::compare(r, 1e-6, 5e-5, "tiny");
  EXPECT_EQ(r.failed, 1u);
}

TEST(GradCheck, TwoLayerDenseCrossEntropy) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(7), h = 2 + rng.below(7), k = 2 + rng.below(7);
    std::vector<ad::Layer> layers{ad::Dense(n, h), ad::Relu{}, ad::Dense(h, k), ad::SoftmaxXent{}};
    ad::init_glorot(layers, rng);
    for (ad::Parameter* p : ad::parameters(layers)) p->value = random_tensor(p->value.shape(), rng);
    const Tensor x = random_tensor({n}, rng);
    const std::size_t label = rng.below(k);

    ad::Tape tape;
    ad::forward(layers, x, tape);
    ad::attach_cross_entropy(tape, label);
    const Tensor gx = ad::backward(layers, tape);

    // Double reference of the whole stack.
    std::vector<arden::testing::Reference> refs;
    Shape s = x.shape();
    for (const ad::Layer& l : layers) {
      arden::testing::Reference r{l, s, {}};
      ad::for_each_parameter(l, [&](const ad::Parameter& p) { r.params.push_back(arden::testing::to_double(p.value)); });
      refs.push_back(std::move(r));
      s = std::visit([&](const auto& v) { return v.output_shape(s); }, l);
    }
    std::vector<double> xd = arden::testing::to_double(x);
    auto loss = [&]() {
      std::vector<double> a = xd;
      for (const auto& r : refs) a = r.forward(a);
      return -std::log(a[label]);
    };
    auto fd = [&](double& slot) {
      const double o = slot;
      slot = o + 1e-3;
      const double lp = loss();
      slot = o - 1e-3;
      const double lm = loss();
      slot = o;
      return (lp - lm) / 2e-3;
    };
    arden::testing::GradCheckResult r;
    for (std::size_t i = 0; i < n; ++i) arden::testing::compare(r, gx[i], fd(xd[i]), "x");
    for (std::size_t li : {0u, 2u}) {
      const auto& d = std::get<ad::Dense>(layers[li]);
      for (std::size_t j = 0; j < d.weight.value.size(); ++j) {
        arden::testing::compare(r, d.weight.grad[j], fd(refs[li].params[0][j]), "w");
      }
      for (std::size_t j = 0; j < d.bias.value.size(); ++j) {
        arden::testing::compare(r, d.bias.grad[j], fd(refs[li].params[1][j]), "b");
      }
    }
    EXPECT_EQ(r.failed, 0u) << r.first_failure;
  }
}

TEST(Sgd, SingleSampleStep) {
  ad::Parameter p(Tensor::scalar(1.0f));
  p.grad[0] = 0.5f;
  std::vector<ad::Parameter*> ps{&p};
  ad::sgd_step(ps, 0.1f, 1);
  EXPECT_FLOAT_EQ(p.value[0], 0.95f);
  EXPECT_EQ(p.grad[0], 0.0f);
}

TEST(Sgd, MeanOverBatch) {
  ad::Parameter p(Tensor::scalar(2.0f));
  p.grad[0] = 4.0f;
  std::vector<ad::Parameter*> ps{&p};
  ad::sgd_step(ps, 0.5f, 4);
  EXPECT_EQ(p.value[0], 1.5f);
}

TEST(Sgd, FrozenUnchanged) {
  ad::Parameter p(Tensor::vector({1, 2, 3}));
  p.trainable = false;
  p.grad.fill(7.0f);
  std::vector<ad::Parameter*> ps{&p};
  ad::sgd_step(ps, 0.3f, 1);
  EXPECT_EQ(values(p.value), (std::vector<float>{1, 2, 3}));
  EXPECT_EQ(max_abs(p.grad), 0.0);
}

TEST(Sgd, ZeroRateIsBitIdentical) {
  Rng rng(4);
  ad::Network net({6}, {ad::Dense(6, 5), ad::Relu{}, ad::Dense(5, 3), ad::SoftmaxXent{}});
  ad::init_glorot(net.layers(), rng);
  const auto before = net.fingerprint();
  ad::Tape tape;
  net.forward(random_tensor({6}, rng), tape);
  ad::attach_cross_entropy(tape, 0);
  net.backward(tape, Tensor::scalar(1.0f));
  net.sgd_step(0.0f, 1);
  EXPECT_EQ(net.fingerprint(), before);
}

TEST(Sgd, RejectsBadRates) {
  ad::Parameter p(Tensor::scalar(1.0f));
  std::vector<ad::Parameter*> ps{&p};
  EXPECT_THROW(ad::sgd_step(ps, -0.1f, 1), ConfigError);
  EXPECT_THROW(ad::sgd_step(ps, NAN, 1), ConfigError);
  EXPECT_THROW(ad::sgd_step(ps, 0.1f, 0), ConfigError);
}

TEST(Init, GlorotBounds) {
  Rng rng(1);
  std::vector<ad::Layer> layers{ad::Dense(30, 20), ad::Conv2D(2, 3, 5, ad::Padding::kValid)};
  ad::init_glorot(layers, rng);
  const double dl = std::sqrt(6.0 / 50.0), cl = std::sqrt(6.0 / (2 * 25 + 3 * 25));
  EXPECT_LE(max_abs(std::get<ad::Dense>(layers[0]).weight.value), dl);
  EXPECT_LE(max_abs(std::get<ad::Conv2D>(layers[1]).weight.value), cl);
  EXPECT_GT(max_abs(std::get<ad::Dense>(layers[0]).weight.value), 0.9 * dl);
  EXPECT_EQ(max_abs(std::get<ad::Dense>(layers[0]).bias.value), 0.0);
}

TEST(Tensor, ShapeChecks) {
  EXPECT_THROW(Tensor(Shape{}), UsageError);
  EXPECT_THROW(Tensor(Shape{2, 0}), UsageError);
  EXPECT_THROW(Tensor({2}, std::vector<float>{1, 2, 3}), UsageError);
  EXPECT_EQ(Tensor({2, 3, 4}).size(), 24u);
}

TEST(Tensor, FiniteAfterOps) {
  Rng rng(8);
  ad::Network net({1, 6, 6}, {ad::Conv2D(1, 2, 3, ad::Padding::kValid), ad::Relu{}, ad::MaxPool2{},
                              ad::Dense(8, 4), ad::SoftmaxXent{}});
  ad::init_glorot(net.layers(), rng);
  for (int t = 0; t < 50; ++t) {
    const Tensor x = random_tensor({1, 6, 6}, rng, -1e3, 1e3);
    ad::Tape tape;
    const Tensor p = net.forward(x, tape);
    EXPECT_TRUE(all_finite(p));
    ad::attach_cross_entropy(tape, rng.below(4));
    EXPECT_TRUE(all_finite(net.backward(tape, Tensor::scalar(1.0f))));
  }
}
