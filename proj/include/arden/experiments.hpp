#pragma once

// Desk-scale experiment grids. A Workbench owns the data, the pretrained
// local network and every trained cloud model, so experiments that share a
// model (and the acceptance run, which chains several) train it once.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/config.hpp"
#include "arden/dataset.hpp"
#include "arden/dp_transform.hpp"
#include "arden/error.hpp"
#include "arden/model_zoo.hpp"
#include "arden/noisy_training.hpp"
#include "arden/rng.hpp"
#include "arden/sgd.hpp"

namespace arden::bench {

enum class ExperimentKind { kSweepEtaLambda, kPerturbRobustness, kLayerwise, kFrameworkCompare, kBudgetCurve };

inline constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::kSweepEtaLambda, "sweep-eta-lambda"},
    {ExperimentKind::kPerturbRobustness, "perturb-robustness"},
    {ExperimentKind::kLayerwise, "layerwise"},
    {ExperimentKind::kFrameworkCompare, "framework-compare"},
    {ExperimentKind::kBudgetCurve, "budget-curve"},
};

inline std::string_view to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  return "?";
}

inline ExperimentKind parse_kind(std::string_view name) {
  std::string known;
  for (const auto& [kind, n] : kKindNames) {
    if (n == name) return kind;
    known += known.empty() ? "" : ", ";
    known += n;
  }
  throw ConfigError("unknown experiment kind '" + std::string(name) + "'; known kinds: " + known);
}

// Hyperparameters shared by all experiments.
struct BenchConfig {
  std::size_t source_size = 4000;  // synthetic pretraining images
  std::size_t pretrain_epochs = 2;
  float pretrain_lr = 0.01f;
  std::size_t pretrain_batch = 32;
  std::string cloud_arch = "cloud-small";
  std::string base_arch = "base-mid";

  // Clean-only training of the cloud part (ARDEN-L1).
  float clean_lr = 0.01f;
  std::size_t clean_batch = 32;
  // BASE trains the whole conv network on raw images and needs more steps.
  float base_lr = 0.05f;
  std::size_t base_batch = 16;
  // Noisy training.
  float noisy_lr = 0.01f;
  std::size_t noisy_batch = 32;
  double eta = 0.5;  // eta = 5 collapses training on 3136-dim representations
  double lambda = 0.2;
  std::size_t epochs = 5;

  // Perturbation applied at test time (and, for noisy training, b).
  double diversity = 5.0;
  double nullification_rate = 0.1;
  std::size_t injection_layer = 3;

  std::size_t draws = 10;
  std::size_t lambda_calibration = 8;  // inputs used for Jacobian estimates
  std::size_t lambda_max_outputs = 4096;
  bool retrain_per_point = true;  // budget-curve: retrain the noisy model for each b
  bool parallel = false;          // run perturbation draws on several threads
};

inline void validate(const BenchConfig& c) {
  if (c.source_size == 0) throw ConfigError("source_size must be positive");
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (c.draws == 0) throw ConfigError("draws must be positive");
  if (!(c.clean_lr > 0.0f) || !(c.noisy_lr > 0.0f) || !(c.pretrain_lr > 0.0f) || !(c.base_lr > 0.0f)) {
    throw ConfigError("learning rates must be positive");
  }
  if (c.clean_batch == 0 || c.noisy_batch == 0 || c.pretrain_batch == 0 || c.base_batch == 0) {
    throw ConfigError("batch sizes must be positive");
  }
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
  if (!(c.eta > 0.0)) throw ConfigError("eta must be positive");
  if (!(c.diversity > 0.0)) throw ConfigError("diversity must be positive");
  if (!(c.nullification_rate >= 0.0 && c.nullification_rate <= 1.0)) {
    throw ConfigError("nullification rate must lie in [0,1]");
  }
}

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single draw
};

inline Stat summarize(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

// Seed sub-streams.
namespace stream {
inline constexpr std::uint64_t kSource = 10;
inline constexpr std::uint64_t kPretrain = 11;
inline constexpr std::uint64_t kCloudInit = 12;
inline constexpr std::uint64_t kCleanTrain = 13;
inline constexpr std::uint64_t kNoisyTrain = 14;
inline constexpr std::uint64_t kBaseInit = 15;
inline constexpr std::uint64_t kBaseTrain = 16;
inline constexpr std::uint64_t kDrawBase = 1000;
}  // namespace stream

class Workbench {
 public:
  Workbench(BenchConfig config, data::Dataset train, data::Dataset test, std::uint64_t seed)
      : config_(std::move(config)), train_(std::move(train)), test_(std::move(test)), seed_(seed) {
    validate(config_);
    if (train_.empty() || test_.empty()) throw DataError("train and test sets must be nonempty");
  }

  const BenchConfig& config() const { return config_; }
  const data::Dataset& train_set() const { return train_; }
  const data::Dataset& test_set() const { return test_; }
  std::uint64_t seed() const { return seed_; }

  const zoo::SplitModel& split() {
    if (!split_) {
      const data::Dataset source = data::synth_dataset("shapes", config_.source_size, sub(stream::kSource));
      zoo::PretrainConfig pc;
      pc.head_arch = config_.cloud_arch;
      pc.sgd = {config_.pretrain_lr, config_.pretrain_batch, config_.pretrain_epochs, sub(stream::kPretrain)};
      ad::Network local = zoo::pretrain_local(source, pc);
      split_.emplace(std::move(local), fresh_cloud(), config_.injection_layer);
    }
    return *split_;
  }

  // Calibrated bound at injection layer l.
  double bound(std::size_t l) {
    auto it = bounds_.find(l);
    if (it == bounds_.end()) it = bounds_.emplace(l, dp::calibrate_bound(split(), train_.images, l)).first;
    return it->second;
  }

  const std::vector<Tensor>& train_representations() {
    if (train_reps_.empty()) train_reps_ = represent(train_.images);
    return train_reps_;
  }
  const std::vector<Tensor>& test_representations() {
    if (test_reps_.empty()) test_reps_ = represent(test_.images);
    return test_reps_;
  }

  ad::Network fresh_cloud() const {
    return zoo::instantiate(zoo::build_architecture(config_.cloud_arch), sub(stream::kCloudInit));
  }

  // ARDEN-L1: cloud trained on clean representations only.
  const ad::Network& clean_cloud() {
    if (!clean_) {
      ad::Network net = fresh_cloud();
      train::train_clean(net, train_representations(), train_.labels,
                         {config_.clean_lr, config_.clean_batch, config_.epochs, sub(stream::kCleanTrain)});
      clean_ = std::make_unique<ad::Network>(std::move(net));
    }
    return *clean_;
  }

  noisy::NoisyTrainConfig noisy_config(double eta, double lambda, double b) {
    noisy::NoisyTrainConfig c = noisy::NoisyTrainConfig::for_diversity(b, bound(config_.injection_layer));
    c.eta = eta;
    c.lambda = lambda;
    c.batch_size = config_.noisy_batch;
    c.learning_rate = config_.noisy_lr;
    c.epochs = config_.epochs;
    c.seed = sub(stream::kNoisyTrain);
    return c;
  }

  const ad::Network& noisy_cloud(double eta, double lambda, double b) {
    const auto key = std::make_tuple(eta, lambda, b);
    auto it = noisy_.find(key);
    if (it == noisy_.end()) {
      ad::Network net = fresh_cloud();
      noisy::train(net, train_representations(), train_.labels, noisy_config(eta, lambda, b));
      it = noisy_.emplace(key, std::make_unique<ad::Network>(std::move(net))).first;
    }
    return *it->second;
  }
  const ad::Network& noisy_cloud() { return noisy_cloud(config_.eta, config_.lambda, config_.diversity); }

  // BASE: the plain network trained end to end on raw images.
  const ad::Network& base() {
    if (!base_) {
      ad::Network net = zoo::instantiate(zoo::build_architecture(config_.base_arch), sub(stream::kBaseInit));
      train::train_clean(net, train_.images, train_.labels,
                         {config_.base_lr, config_.base_batch, config_.epochs, sub(stream::kBaseTrain)});
      base_ = std::make_unique<ad::Network>(std::move(net));
    }
    return *base_;
  }

  dp::PerturbationConfig perturbation(double b, double mu, std::size_t l) {
    dp::PerturbationConfig pc;
    pc.diversity = b;
    pc.nullification_rate = mu;
    pc.injection_layer = l;
    pc.bound = bound(l);
    return pc;
  }

  double clean_accuracy(const ad::Network& cloud) {
    return train::accuracy(cloud, test_representations(), test_.labels);
  }

  double base_accuracy() { return train::accuracy(base(), test_.images, test_.labels); }

  // Accuracy over `draws` independent perturbations of the whole test set.
  // Draw d always uses the same generator, so results do not depend on
  // threading.
  Stat perturbed_accuracy(const ad::Network& cloud, const dp::PerturbationConfig& pc) {
    const zoo::SplitModel& model = split();
    std::vector<double> acc(config_.draws);
    auto run_draw = [&](std::size_t d) {
      Rng rng(derive_seed(seed_, stream::kDrawBase + d));
      std::size_t hit = 0;
      for (std::size_t i = 0; i < test_.size(); ++i) {
        const dp::PerturbedRepresentation x = dp::transform(test_.images[i], model, pc, rng);
        if (argmax(cloud.forward(x.tensor())) == test_.labels[i]) ++hit;
      }
      acc[d] = static_cast<double>(hit) / static_cast<double>(test_.size());
    };
    const std::size_t threads = config_.parallel ? std::max(1u, std::thread::hardware_concurrency()) : 1;
    if (threads <= 1) {
      for (std::size_t d = 0; d < config_.draws; ++d) run_draw(d);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
          for (std::size_t d = t; d < config_.draws; d += threads) run_draw(d);
        });
      }
      for (auto& th : pool) th.join();
    }
    return summarize(acc);
  }

  dp::PrivacyBudgetReport budget(double b, double mu, std::size_t l) {
    const dp::PerturbationConfig pc = perturbation(b, mu, l);
    const std::size_t n = std::min(config_.lambda_calibration, train_.size());
    const std::span<const Tensor> calib(train_.images.data(), std::max<std::size_t>(n, 1));
    dp::LambdaOptions opts;
    opts.max_outputs = config_.lambda_max_outputs;
    return dp::budget_for(split(), pc, calib, opts);
  }

 private:
  std::uint64_t sub(std::uint64_t stream) const { return derive_seed(seed_, stream); }

  std::vector<Tensor> represent(const std::vector<Tensor>& images) {
    const ad::Network& local = split().local();
    std::vector<Tensor> out;
    out.reserve(images.size());
    for (const Tensor& x : images) out.push_back(local.forward(x));
    return out;
  }

  BenchConfig config_;
  data::Dataset train_;
  data::Dataset test_;
  std::uint64_t seed_;
  std::optional<zoo::SplitModel> split_;
  std::map<std::size_t, double> bounds_;
  std::vector<Tensor> train_reps_;
  std::vector<Tensor> test_reps_;
  std::unique_ptr<ad::Network> clean_;
  std::unique_ptr<ad::Network> base_;
  std::map<std::tuple<double, double, double>, std::unique_ptr<ad::Network>> noisy_;
};

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::kFrameworkCompare;
  std::vector<double> etas{1.0, 5.0, 10.0};
  std::vector<double> lambdas{0.2, 0.5, 0.8};
  std::vector<double> diversities{1.0, 2.0, 5.0, 10.0};
  std::vector<double> nullification_rates{0.1};
  std::vector<std::size_t> layers{0, 1, 2, 3};
  std::uint64_t seed = 1;
  std::string output;  // CSV path; empty means the caller's stream only
};

inline void validate(const ExperimentSpec& s) {
  auto nonempty = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string(what) + " grid is empty");
  };
  switch (s.kind) {
    case ExperimentKind::kSweepEtaLambda:
      nonempty(!s.etas.empty(), "eta");
      nonempty(!s.lambdas.empty(), "lambda");
      break;
    case ExperimentKind::kPerturbRobustness:
      nonempty(!s.diversities.empty(), "diversity");
      nonempty(!s.nullification_rates.empty(), "nullification-rate");
      break;
    case ExperimentKind::kLayerwise:
      nonempty(!s.layers.empty(), "layer");
      break;
    case ExperimentKind::kBudgetCurve:
      nonempty(!s.diversities.empty(), "diversity");
      nonempty(!s.nullification_rates.empty(), "nullification-rate");
      break;
    case ExperimentKind::kFrameworkCompare:
      break;
  }
  for (double l : s.lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("lambda grid values must lie in [0,1]");
  }
  for (double e : s.etas) {
    if (!(e > 0.0)) throw ConfigError("eta grid values must be positive");
  }
  for (double b : s.diversities) {
    if (!(b > 0.0)) throw ConfigError("diversity grid values must be positive");
  }
  for (double m : s.nullification_rates) {
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("nullification rates must lie in [0,1]");
  }
}

inline std::string csv_header(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kSweepEtaLambda:
      return "eta,lambda,clean_mean,clean_std,perturbed_mean,perturbed_std";
    case ExperimentKind::kPerturbRobustness:
      return "b,mu,epsilon,arden_mean,arden_std,l1_mean,l1_std";
    case ExperimentKind::kLayerwise:
      return "layer,B,lambda,epsilon,approximate,arden_mean,arden_std,l1_mean,l1_std";
    case ExperimentKind::kFrameworkCompare:
      return "framework,test,acc_mean,acc_std";
    case ExperimentKind::kBudgetCurve:
      return "b,mu,epsilon,arden_mean,arden_std,l1_mean,l1_std";
  }
  return {};
}

struct ExperimentResult {
  std::string header;
  std::vector<std::string> rows;

  std::string csv() const {
    std::string out = header + "\n";
    for (const auto& r : rows) out += r + "\n";
    return out;
  }
};

namespace detail {

class Row {
 public:
  template <typename T>
  Row& operator<<(const T& v) {
    if (!first_) os_ << ',';
    first_ = false;
    if constexpr (std::is_floating_point_v<T>) {
      os_ << std::setprecision(10) << v;
    } else {
      os_ << v;
    }
    return *this;
  }
  Row& operator<<(const Stat& s) { return *this << s.mean << s.std; }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
  bool first_ = true;
};

// Writes rows as they are produced so a failure leaves the finished part.
class Sink {
 public:
  Sink(const ExperimentSpec& spec, std::ostream* extra) : extra_(extra) {
    result_.header = csv_header(spec.kind);
    if (!spec.output.empty()) {
      file_.open(spec.output);
      if (!file_) throw ConfigError("cannot write " + spec.output);
    }
    emit(result_.header);
  }
  void add(const Row& r) {
    result_.rows.push_back(r.str());
    emit(result_.rows.back());
  }
  ExperimentResult take() { return std::move(result_); }

 private:
  void emit(const std::string& line) {
    if (file_.is_open()) file_ << line << '\n' << std::flush;
    if (extra_) *extra_ << line << '\n' << std::flush;
  }
  ExperimentResult result_;
  std::ofstream file_;
  std::ostream* extra_;
};

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentSpec& spec, Workbench& wb, std::ostream* out = nullptr) {
  validate(spec);
  const BenchConfig& c = wb.config();
  const std::size_t l = c.injection_layer;
  detail::Sink sink(spec, out);
  switch (spec.kind) {
    case ExperimentKind::kSweepEtaLambda:
      for (double eta : spec.etas) {
        for (double lambda : spec.lambdas) {
          const ad::Network& net = wb.noisy_cloud(eta, lambda, c.diversity);
          const double clean = wb.clean_accuracy(net);
          const Stat pert = wb.perturbed_accuracy(net, wb.perturbation(c.diversity, c.nullification_rate, l));
          sink.add(detail::Row{} << eta << lambda << Stat{clean, 0.0} << pert);
        }
      }
      break;
    case ExperimentKind::kPerturbRobustness: {
      const ad::Network& arden = wb.noisy_cloud();
      const ad::Network& l1 = wb.clean_cloud();
      for (double b : spec.diversities) {
        for (double mu : spec.nullification_rates) {
          const auto pc = wb.perturbation(b, mu, l);
          sink.add(detail::Row{} << b << mu << wb.budget(b, mu, l).epsilon << wb.perturbed_accuracy(arden, pc)
                                 << wb.perturbed_accuracy(l1, pc));
        }
      }
      break;
    }
    case ExperimentKind::kLayerwise: {
      const ad::Network& arden = wb.noisy_cloud();
      const ad::Network& l1 = wb.clean_cloud();
      for (std::size_t layer : spec.layers) {
        const auto pc = wb.perturbation(c.diversity, c.nullification_rate, layer);
        const dp::PrivacyBudgetReport br = wb.budget(c.diversity, c.nullification_rate, layer);
        sink.add(detail::Row{} << layer << pc.bound << br.lambda << br.epsilon
                               << (br.approximate ? "true" : "false") << wb.perturbed_accuracy(arden, pc)
                               << wb.perturbed_accuracy(l1, pc));
      }
      break;
    }
    case ExperimentKind::kFrameworkCompare: {
      const auto pc = wb.perturbation(c.diversity, c.nullification_rate, l);
      sink.add(detail::Row{} << "BASE" << "clean" << Stat{wb.base_accuracy(), 0.0});
      sink.add(detail::Row{} << "ARDEN-L1" << "clean" << Stat{wb.clean_accuracy(wb.clean_cloud()), 0.0});
      sink.add(detail::Row{} << "ARDEN-L1" << "perturbed" << wb.perturbed_accuracy(wb.clean_cloud(), pc));
      sink.add(detail::Row{} << "ARDEN" << "perturbed" << wb.perturbed_accuracy(wb.noisy_cloud(), pc));
      break;
    }
    case ExperimentKind::kBudgetCurve: {
      const double mu = spec.nullification_rates.front();
      const ad::Network& l1 = wb.clean_cloud();
      for (double b : spec.diversities) {
        const ad::Network& arden =
            c.retrain_per_point ? wb.noisy_cloud(c.eta, c.lambda, b) : wb.noisy_cloud();
        const auto pc = wb.perturbation(b, mu, l);
        sink.add(detail::Row{} << b << mu << wb.budget(b, mu, l).epsilon << wb.perturbed_accuracy(arden, pc)
                               << wb.perturbed_accuracy(l1, pc));
      }
      break;
    }
  }
  return sink.take();
}

inline ExperimentResult run_experiment(const ExperimentSpec& spec, const BenchConfig& config,
                                       data::Dataset train, data::Dataset test, std::ostream* out = nullptr) {
  Workbench wb(config, std::move(train), std::move(test), spec.seed);
  return run_experiment(spec, wb, out);
}


// Keys understood by apply_config, beyond which the CLI adds its own.
inline const std::set<std::string>& bench_config_keys() {
  static const std::set<std::string> keys{
      "source_size", "pretrain_epochs", "pretrain_lr", "pretrain_batch", "cloud_arch", "base_arch",
      "clean_lr", "clean_batch", "base_lr", "base_batch", "noisy_lr", "noisy_batch", "eta", "lambda", "epochs",
      "b", "mu", "layer", "draws", "lambda_calibration", "retrain_per_point", "parallel", "seed", "kind",
      "etas", "lambdas", "bs", "mus", "layers", "output"};
  return keys;
}

inline void apply_config(const config::KeyValues& kv, BenchConfig& c, ExperimentSpec& s) {
  auto size = [&](const char* k, std::size_t& dst) {
    if (auto v = kv.integer(k)) dst = static_cast<std::size_t>(*v);
  };
  auto real = [&](const char* k, double& dst) {
    if (auto v = kv.number(k)) dst = *v;
  };
  auto flt = [&](const char* k, float& dst) {
    if (auto v = kv.number(k)) dst = static_cast<float>(*v);
  };
  size("source_size", c.source_size);
  size("pretrain_epochs", c.pretrain_epochs);
  flt("pretrain_lr", c.pretrain_lr);
  size("pretrain_batch", c.pretrain_batch);
  if (auto v = kv.string("cloud_arch")) c.cloud_arch = *v;
  if (auto v = kv.string("base_arch")) c.base_arch = *v;
  flt("clean_lr", c.clean_lr);
  size("clean_batch", c.clean_batch);
  flt("base_lr", c.base_lr);
  size("base_batch", c.base_batch);
  flt("noisy_lr", c.noisy_lr);
  size("noisy_batch", c.noisy_batch);
  real("eta", c.eta);
  real("lambda", c.lambda);
  size("epochs", c.epochs);
  real("b", c.diversity);
  real("mu", c.nullification_rate);
  size("layer", c.injection_layer);
  size("draws", c.draws);
  size("lambda_calibration", c.lambda_calibration);
  if (auto v = kv.boolean("retrain_per_point")) c.retrain_per_point = *v;
  if (auto v = kv.boolean("parallel")) c.parallel = *v;
  if (auto v = kv.integer("seed")) s.seed = *v;
  if (auto v = kv.string("kind")) s.kind = parse_kind(*v);
  if (auto v = kv.numbers("etas")) s.etas = *v;
  if (auto v = kv.numbers("lambdas")) s.lambdas = *v;
  if (auto v = kv.numbers("bs")) s.diversities = *v;
  if (auto v = kv.numbers("mus")) s.nullification_rates = *v;
  if (auto v = kv.numbers("layers")) {
    s.layers.clear();
    for (double x : *v) {
      if (x < 0 || x != std::floor(x)) throw ConfigError("layers must be non-negative integers");
      s.layers.push_back(static_cast<std::size_t>(x));
    }
  }
  if (auto v = kv.string("output")) s.output = *v;
}

// Parses a CSV produced above back into numeric columns (first row header).
inline std::vector<std::vector<std::string>> split_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    out.push_back(std::move(cells));
  }
  return out;
}

}  // namespace arden::bench
