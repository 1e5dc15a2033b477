#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "arden/config.hpp"
#include "arden/dataset.hpp"
#include "arden/experiments.hpp"

using namespace arden;
namespace fs = std::filesystem;

namespace {

using Bytes = std::vector<unsigned char>;

void be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

Bytes idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, std::uint32_t magic = 0x803) {
  Bytes b;
  be32(b, magic);
  be32(b, n);
  be32(b, rows);
  be32(b, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back(static_cast<unsigned char>(i * 37));
  return b;
}

Bytes idx_labels(std::uint32_t n, std::uint32_t magic = 0x801) {
  Bytes b;
  be32(b, magic);
  be32(b, n);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

struct IdxPair {
  fs::path images, labels;
  IdxPair(const Bytes& img, const Bytes& lab) {
    const std::string stem = "arden_idx_" + std::to_string(::getpid()) + "_" + std::to_string(counter++);
    images = fs::temp_directory_path() / (stem + "_img");
    labels = fs::temp_directory_path() / (stem + "_lab");
    write(images, img);
    write(labels, lab);
  }
  ~IdxPair() {
    fs::remove(images);
    fs::remove(labels);
  }
  static void write(const fs::path& p, const Bytes& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  static inline int counter = 0;
};

data::IdxErrorKind idx_kind(const Bytes& img, const Bytes& lab) {
  IdxPair p(img, lab);
  try {
    data::load_idx(p.images, p.labels);
  } catch (const data::IdxError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "accepted";
  return data::IdxErrorKind::kIo;
}

bench::BenchConfig tiny_config() {
  bench::BenchConfig c;
  c.source_size = 40;
  c.pretrain_epochs = 1;
  c.cloud_arch = "cloud-small";
  c.base_arch = "base-mid";
  c.epochs = 1;
  c.draws = 3;
  c.lambda_calibration = 2;
  c.noisy_lr = 0.01f;
  return c;
}

std::string run_csv(bench::ExperimentKind kind, std::uint64_t seed) {
  bench::ExperimentSpec s;
  s.kind = kind;
  s.seed = seed;
  s.etas = {0.5};
  s.lambdas = {0.5};
  s.diversities = {0.5, 2.0};
  s.layers = {2, 3};
  return bench::run_experiment(s, tiny_config(), data::synth_dataset("shapes", 30, 1),
                               data::synth_dataset("shapes", 20, 2))
      .csv();
}

}  // namespace

TEST(Idx, LoadsSmallPair) {
  IdxPair p(idx_images(3, 2, 4), idx_labels(3));
  const auto ds = data::load_idx(p.images, p.labels);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.images[0].shape(), (Shape{1, 2, 4}));
  EXPECT_EQ(ds.labels[2], 2u);
  EXPECT_FLOAT_EQ(ds.images[0].data()[1], 37.0f / 255.0f);
  for (const auto& im : ds.images) {
    for (float v : im.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Idx, DistinctErrors) {
  EXPECT_EQ(idx_kind(idx_images(3, 2, 2, 0x801), idx_labels(3)), data::IdxErrorKind::kBadMagic);
  EXPECT_EQ(idx_kind(idx_images(3, 2, 2), idx_labels(3, 0x803)), data::IdxErrorKind::kBadMagic);

  Bytes extra = idx_labels(3);
  extra.insert(extra.end(), 10, 0);
  EXPECT_EQ(idx_kind(idx_images(3, 2, 2), extra), data::IdxErrorKind::kCountMismatch);

  Bytes cut = idx_images(3, 2, 2);
  cut.resize(cut.size() - 1);
  EXPECT_EQ(idx_kind(cut, idx_labels(3)), data::IdxErrorKind::kTruncated);
  EXPECT_EQ(idx_kind(Bytes{0, 0}, idx_labels(3)), data::IdxErrorKind::kTruncated);

  EXPECT_EQ(idx_kind(idx_images(3, 2, 2), idx_labels(4)), data::IdxErrorKind::kCountMismatch);
  EXPECT_EQ(idx_kind(idx_images(1, 0, 2), idx_labels(1)), data::IdxErrorKind::kBadHeader);

  Bytes bad_label = idx_labels(1);
  bad_label.back() = 12;
  EXPECT_EQ(idx_kind(idx_images(1, 2, 2), bad_label), data::IdxErrorKind::kBadLabel);

  try {
    data::load_idx("/nonexistent/a", "/nonexistent/b");
    FAIL();
  } catch (const data::IdxError& e) {
    EXPECT_EQ(e.kind(), data::IdxErrorKind::kIo);
  }
}

TEST(Idx, BundledMnistSubset) {
  const fs::path dir = ARDEN_DATA_DIR;
  if (!fs::exists(dir / "train-images-idx3-ubyte")) GTEST_SKIP() << "no MNIST files";
  const auto test = data::load_idx_dir(dir, "t10k");
  EXPECT_GT(test.size(), 0u);
  EXPECT_EQ(test.images[0].shape(), (Shape{1, 28, 28}));
}

TEST(Synth, SameSeedSameData) {
  const auto a = data::synth_dataset("shapes", 50, 3), b = data::synth_dataset("shapes", 50, 3);
  const auto c = data::synth_dataset("shapes", 50, 4);
  ASSERT_EQ(a.size(), 50u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(bit_equal(a.images[i], b.images[i]));
    ASSERT_EQ(a.labels[i], b.labels[i]);
    differs = differs || !bit_equal(a.images[i], c.images[i]);
  }
  EXPECT_TRUE(differs);
}

TEST(Synth, SizeOneAndRange) {
  const auto one = data::synth_dataset("shapes", 1, 9);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.images[0].shape(), (Shape{1, 28, 28}));
  const auto ds = data::synth_dataset("shapes", 200, 1);
  for (const auto& im : ds.images) {
    float hi = 0.0f;
    for (float v : im.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
      hi = std::max(hi, v);
    }
    EXPECT_GT(hi, 0.0f);
  }
  EXPECT_THROW(data::synth_dataset("noise", 1, 1), ConfigError);
}

TEST(Synth, ClassHistogramUniform) {
  const auto ds = data::synth_dataset("shapes", 10000, 5);
  std::vector<std::size_t> h(10, 0);
  for (std::size_t y : ds.labels) ++h.at(y);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_GE(h[k], 950u) << k;
    EXPECT_LE(h[k], 1050u) << k;
  }
}

TEST(Config, ParsesKeyValues) {
  const auto kv = config::KeyValues::parse(" a = 1 # comment\n\nbs=0.5, 2 ,5\nflag=yes\nname = cloud-mid\n");
  EXPECT_EQ(*kv.integer("a"), 1u);
  EXPECT_EQ(*kv.numbers("bs"), (std::vector<double>{0.5, 2.0, 5.0}));
  EXPECT_TRUE(*kv.boolean("flag"));
  EXPECT_EQ(*kv.string("name"), "cloud-mid");
  EXPECT_FALSE(kv.number("missing").has_value());
}

TEST(Config, Errors) {
  EXPECT_THROW(config::KeyValues::parse("novalue\n"), ConfigError);
  EXPECT_THROW(config::KeyValues::parse("=3\n"), ConfigError);
  EXPECT_THROW(config::KeyValues::parse("a=1\na=2\n"), ConfigError);
  const auto kv = config::KeyValues::parse("x=abc\nn=-3\nf=maybe\nl=\nw=1");
  EXPECT_THROW(kv.number("x"), ConfigError);
  EXPECT_THROW(kv.integer("n"), ConfigError);
  EXPECT_THROW(kv.boolean("f"), ConfigError);
  EXPECT_THROW(kv.numbers("l"), ConfigError);
  EXPECT_THROW(kv.require_known({"x", "n", "f", "l"}), ConfigError);
  EXPECT_THROW(config::KeyValues::load("/nonexistent/config.txt"), ConfigError);
}

TEST(Config, AppliesToBench) {
  bench::BenchConfig c;
  bench::ExperimentSpec s;
  const auto kv = config::KeyValues::parse("kind=budget-curve\nbs=1,2\nmu=0.2\nlayers=1,3\nepochs=2\nseed=7\n");
  kv.require_known(bench::bench_config_keys());
  bench::apply_config(kv, c, s);
  EXPECT_EQ(s.kind, bench::ExperimentKind::kBudgetCurve);
  EXPECT_EQ(s.diversities, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(s.layers, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(c.nullification_rate, 0.2);
  EXPECT_EQ(c.epochs, 2u);
  EXPECT_EQ(s.seed, 7u);
  EXPECT_THROW(bench::apply_config(config::KeyValues::parse("layers=1.5"), c, s), ConfigError);
  EXPECT_THROW(bench::apply_config(config::KeyValues::parse("kind=plot"), c, s), ConfigError);
}

TEST(Experiments, KindsAndValidation) {
  for (const char* k : {"sweep-eta-lambda", "perturb-robustness", "layerwise", "framework-compare", "budget-curve"}) {
    EXPECT_EQ(bench::to_string(bench::parse_kind(k)), k);
  }
  try {
    bench::parse_kind("fig7");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("budget-curve"), std::string::npos);
  }
  bench::ExperimentSpec s;
  s.kind = bench::ExperimentKind::kBudgetCurve;
  s.diversities.clear();
  EXPECT_THROW(bench::validate(s), ConfigError);
  s = {};
  s.lambdas = {1.5};
  EXPECT_THROW(bench::validate(s), ConfigError);
  bench::BenchConfig c;
  c.noisy_lr = 0.0f;
  EXPECT_THROW(bench::validate(c), ConfigError);
  c = {};
  c.draws = 0;
  EXPECT_THROW(bench::validate(c), ConfigError);
  EXPECT_THROW(bench::Workbench(bench::BenchConfig{}, data::Dataset{}, data::synth_dataset("shapes", 2, 1), 1),
               DataError);
}

TEST(Experiments, SampleStd) {
  const auto s = bench::summarize({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(bench::summarize({0.7}).std, 0.0);
}

TEST(Experiments, CsvHeadersFixed) {
  EXPECT_EQ(bench::csv_header(bench::ExperimentKind::kFrameworkCompare), "framework,test,acc_mean,acc_std");
  EXPECT_EQ(bench::csv_header(bench::ExperimentKind::kBudgetCurve), "b,mu,epsilon,arden_mean,arden_std,l1_mean,l1_std");
  const auto rows = bench::split_csv("a,b\n1,2\n\n3,4\n");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2][1], "4");
}

TEST(Experiments, FrameworkCompareRowsAndDeterminism) {
  const std::string a = run_csv(bench::ExperimentKind::kFrameworkCompare, 3);
  const auto rows = bench::split_csv(a);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0][0], "framework");
  const std::vector<std::pair<std::string, std::string>> expected{
      {"BASE", "clean"}, {"ARDEN-L1", "clean"}, {"ARDEN-L1", "perturbed"}, {"ARDEN", "perturbed"}};
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(rows[i + 1][0], expected[i].first);
    EXPECT_EQ(rows[i + 1][1], expected[i].second);
    const double acc = std::stod(rows[i + 1][2]);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
  EXPECT_EQ(run_csv(bench::ExperimentKind::kFrameworkCompare, 3), a);
}

TEST(Experiments, BudgetCurveAndLayerwiseShapes) {
  const auto budget = bench::split_csv(run_csv(bench::ExperimentKind::kBudgetCurve, 4));
  ASSERT_EQ(budget.size(), 3u);
  // Larger b means less privacy loss.
  EXPECT_GT(std::stod(budget[1][2]), std::stod(budget[2][2]));
  const auto layers = bench::split_csv(run_csv(bench::ExperimentKind::kLayerwise, 4));
  ASSERT_EQ(layers.size(), 3u);
  EXPECT_EQ(layers[1][0], "2");
  EXPECT_EQ(layers[2][0], "3");
}

TEST(Experiments, OutputFileMatchesResult) {
  bench::ExperimentSpec s;
  s.kind = bench::ExperimentKind::kPerturbRobustness;
  s.diversities = {1.0};
  s.output = (fs::temp_directory_path() / ("arden_bench_" + std::to_string(::getpid()) + ".csv")).string();
  std::ostringstream echo;
  const auto r = bench::run_experiment(s, tiny_config(), data::synth_dataset("shapes", 30, 1),
                                       data::synth_dataset("shapes", 20, 2), &echo);
  std::ifstream in(s.output);
  std::stringstream file;
  file << in.rdbuf();
  fs::remove(s.output);
  EXPECT_EQ(file.str(), r.csv());
  EXPECT_EQ(echo.str(), r.csv());
}
