#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "arden/config.hpp"
#include "arden/dataset.hpp"
#include "arden/dp_transform.hpp"
#include "arden/experiments.hpp"
#include "arden/model_zoo.hpp"
#include "arden/noisy_training.hpp"
#include "arden/privacy_verify.hpp"
#include "arden/runtime.hpp"
#include "arden/sgd.hpp"

using namespace arden;

namespace {

volatile std::sig_atomic_t g_stop = 0;
volatile std::sig_atomic_t g_reload = 0;

void on_stop(int) { g_stop = 1; }
void on_reload(int) { g_reload = 1; }

data::Dataset load_split(const std::string& dir, const char* prefix, std::size_t limit) {
  data::Dataset d = data::load_idx_dir(dir, prefix);
  return limit ? d.head(limit) : d;
}

struct Common {
  std::uint64_t seed = 1;
  std::string config_path;
  config::KeyValues config;
};

struct ModelSpec {
  std::string id;
  std::filesystem::path path;
};

ModelSpec parse_model_spec(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--model expects id=path, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

void load_models(net::ModelRegistry& reg, const std::vector<ModelSpec>& specs, const std::string& arch) {
  for (const auto& m : specs) reg.put(m.id, zoo::load_model(zoo::build_architecture(arch), m.path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ARDEN-style private split inference: pretraining, noisy training, serving and experiments"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--seed", common.seed, "Master random seed")->capture_default_str();
  app.add_option("--config", common.config_path, "Flat key=value configuration file");

  // pretrain -----------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Pretrain the local layers on synthetic shapes and freeze them");
  std::size_t pre_size = 4000, pre_epochs = 2, pre_batch = 32;
  float pre_lr = 0.01f;
  std::string pre_out = "local.bin", pre_head = bench::BenchConfig{}.cloud_arch;
  pre->add_option("--source-size", pre_size)->capture_default_str();
  pre->add_option("--epochs", pre_epochs)->capture_default_str();
  pre->add_option("--lr", pre_lr)->capture_default_str();
  pre->add_option("--batch", pre_batch)->capture_default_str();
  pre->add_option("--head", pre_head, "Head architecture used during pretraining")->capture_default_str();
  pre->add_option("-o,--out", pre_out)->capture_default_str();

  // train --------------------------------------------------------------------
  auto* trn = app.add_subcommand("train", "Train a cloud model on representations (lambda=1 is clean SGD)");
  std::string trn_local = "local.bin", trn_data = "data/mnist", trn_out = "cloud.bin", trn_arch = bench::BenchConfig{}.cloud_arch,
              trn_csv;
  std::size_t trn_limit = 0, trn_test_limit = 0;
  noisy::NoisyTrainConfig trn_cfg;
  trn_cfg.batch_size = bench::BenchConfig{}.noisy_batch;
  trn_cfg.learning_rate = bench::BenchConfig{}.noisy_lr;
  trn_cfg.eta = bench::BenchConfig{}.eta;
  double trn_b = 5.0, trn_mu = 0.1;
  trn->add_option("--local", trn_local, "Frozen local weights")->capture_default_str();
  trn->add_option("--data", trn_data, "Directory with MNIST IDX files")->capture_default_str();
  trn->add_option("--limit", trn_limit, "Use only the first N training samples (0 = all)");
  trn->add_option("--test-limit", trn_test_limit, "Use only the first N test samples (0 = all)");
  trn->add_option("--arch", trn_arch)->capture_default_str();
  trn->add_option("--lambda", trn_cfg.lambda)->capture_default_str();
  trn->add_option("--eta", trn_cfg.eta)->capture_default_str();
  trn->add_option("--b", trn_b, "Laplace diversity")->capture_default_str();
  trn->add_option("--mu", trn_mu, "Nullification rate used when reporting perturbed accuracy")
      ->capture_default_str();
  trn->add_option("--epochs", trn_cfg.epochs)->capture_default_str();
  trn->add_option("--lr", trn_cfg.learning_rate)->capture_default_str();
  trn->add_option("--batch", trn_cfg.batch_size)->capture_default_str();
  trn->add_option("-o,--out", trn_out)->capture_default_str();
  trn->add_option("--csv", trn_csv, "Per-epoch log (default: stdout)");

  // serve --------------------------------------------------------------------
  auto* srv = app.add_subcommand("serve", "Serve cloud models over TCP (SIGHUP reloads weight files)");
  std::string srv_bind, srv_arch = bench::BenchConfig{}.cloud_arch;
  std::vector<std::string> srv_models;
  srv->add_option("--bind", srv_bind, "host:port (default $ARDEN_BIND or 127.0.0.1:7878)");
  srv->add_option("--model", srv_models, "id=weights.bin, repeatable")->required();
  srv->add_option("--arch", srv_arch)->capture_default_str();

  // infer --------------------------------------------------------------------
  auto* inf = app.add_subcommand("infer", "Perturb test images locally and classify them on the server");
  std::string inf_endpoint, inf_local = "local.bin", inf_data = "data/mnist", inf_model = "arden";
  std::size_t inf_count = 10, inf_layer = 3;
  double inf_b = 5.0, inf_mu = 0.1;
  std::optional<double> inf_bound;
  double inf_timeout = 10.0;
  inf->add_option("--endpoint", inf_endpoint, "host:port (default $ARDEN_ENDPOINT or 127.0.0.1:7878)");
  inf->add_option("--local", inf_local)->capture_default_str();
  inf->add_option("--data", inf_data)->capture_default_str();
  inf->add_option("--model-id", inf_model)->capture_default_str();
  inf->add_option("--count", inf_count, "Number of test images")->capture_default_str();
  inf->add_option("--b", inf_b)->capture_default_str();
  inf->add_option("--mu", inf_mu)->capture_default_str();
  inf->add_option("--layer", inf_layer)->capture_default_str();
  inf->add_option("--bound", inf_bound, "B; calibrated on the training images when omitted");
  inf->add_option("--timeout", inf_timeout, "Seconds")->capture_default_str();

  // sweep --------------------------------------------------------------------
  auto* swp = app.add_subcommand("sweep", "Run an experiment grid and write CSV");
  bench::BenchConfig swp_cfg;
  bench::ExperimentSpec swp_spec;
  std::string swp_kind, swp_data = "data/mnist", swp_out;
  std::size_t swp_limit = 0, swp_test_limit = 0;
  swp->add_option("--kind", swp_kind, "sweep-eta-lambda | perturb-robustness | layerwise | framework-compare | "
                                      "budget-curve")
      ->required();
  swp->add_option("--data", swp_data)->capture_default_str();
  swp->add_option("--limit", swp_limit, "Training samples (0 = all)");
  swp->add_option("--test-limit", swp_test_limit, "Test samples (0 = all)");
  swp->add_option("--epochs", swp_cfg.epochs)->capture_default_str();
  swp->add_option("--draws", swp_cfg.draws)->capture_default_str();
  swp->add_option("--etas", swp_spec.etas)->delimiter(',');
  swp->add_option("--lambdas", swp_spec.lambdas)->delimiter(',');
  swp->add_option("--bs", swp_spec.diversities, "Diversity grid")->delimiter(',');
  swp->add_option("--mus", swp_spec.nullification_rates)->delimiter(',');
  swp->add_option("--layers", swp_spec.layers)->delimiter(',');
  swp->add_flag("--parallel", swp_cfg.parallel, "Run perturbation draws concurrently");
  swp->add_option("-o,--output", swp_out, "CSV path (rows are also printed)");

  // budget -------------------------------------------------------------------
  auto* bud = app.add_subcommand("budget", "Privacy budget for a perturbation setting");
  double bud_mu = 0.1, bud_b = 5.0, bud_lambda = 1.0;
  std::optional<double> bud_sigma, bud_bound;
  std::string bud_local, bud_data = "data/mnist";
  std::size_t bud_layer = 3, bud_calib = 8;
  bud->add_option("--mu", bud_mu)->capture_default_str();
  bud->add_option("--sigma", bud_sigma, "sigma directly (otherwise B / b)");
  bud->add_option("--b", bud_b)->capture_default_str();
  bud->add_option("--bound", bud_bound, "B (calibrated from --local when omitted)");
  bud->add_option("--lambda", bud_lambda, "Lambda when no local model is given")->capture_default_str();
  bud->add_option("--local", bud_local, "Local weights for calibrating B and Lambda");
  bud->add_option("--data", bud_data)->capture_default_str();
  bud->add_option("--layer", bud_layer)->capture_default_str();
  bud->add_option("--calibration", bud_calib, "Images used for Lambda")->capture_default_str();

  // verify-dp ----------------------------------------------------------------
  auto* ver = app.add_subcommand("verify-dp", "Exact oracle checks of the budget building blocks");
  std::size_t ver_trials = 1000;
  ver->add_option("--trials", ver_trials)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (!common.config_path.empty()) common.config = config::KeyValues::load(common.config_path);

    if (*pre) {
      const auto src = data::synth_dataset("shapes", pre_size, derive_seed(common.seed, bench::stream::kSource));
      zoo::PretrainConfig pc;
      pc.head_arch = pre_head;
      pc.sgd = {pre_lr, pre_batch, pre_epochs, derive_seed(common.seed, bench::stream::kPretrain)};
      const ad::Network local = zoo::pretrain_local(src, pc);
      zoo::save_weights(local, pre_out);
      std::cout << "wrote " << pre_out << " fingerprint=" << std::hex << local.fingerprint() << std::dec << '\n';
      return 0;
    }

    if (*trn) {
      const auto train = load_split(trn_data, "train", trn_limit);
      const auto test = load_split(trn_data, "t10k", trn_test_limit);
      ad::Network local = zoo::load_model(zoo::build_architecture("local-3"), trn_local);
      local.set_trainable(false);
      const zoo::SplitModel split(std::move(local), zoo::instantiate(zoo::build_architecture(trn_arch), 0),
                                  zoo::build_architecture("local-3").layers.size());
      const std::size_t l = split.local().size();
      const double bound = dp::calibrate_bound(split, train.images, l);
      std::vector<Tensor> reps, test_reps;
      for (const auto& x : train.images) reps.push_back(split.local().forward(x));
      for (const auto& x : test.images) test_reps.push_back(split.local().forward(x));

      noisy::NoisyTrainConfig cfg = trn_cfg;
      cfg.bound = bound;
      cfg.sigma = bound / trn_b;
      cfg.seed = common.seed;
      dp::PerturbationConfig pc;
      pc.bound = bound;
      pc.diversity = trn_b;
      pc.nullification_rate = trn_mu;
      pc.injection_layer = l;

      std::ofstream csv_file;
      std::ostream* csv = &std::cout;
      if (!trn_csv.empty()) {
        csv_file.open(trn_csv);
        csv = &csv_file;
      }
      *csv << noisy::kEpochCsvHeader << '\n';
      auto evaluate = [&](const ad::Network& cloud) {
        const double clean = train::accuracy(cloud, test_reps, test.labels);
        Rng rng(derive_seed(common.seed, bench::stream::kDrawBase));
        std::size_t hit = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
          if (argmax(cloud.forward(dp::transform(test.images[i], split, pc, rng).tensor())) == test.labels[i]) ++hit;
        }
        return std::pair<double, double>(clean, static_cast<double>(hit) / static_cast<double>(test.size()));
      };
      ad::Network cloud =
          zoo::instantiate(zoo::build_architecture(trn_arch), derive_seed(common.seed, bench::stream::kCloudInit));
      for (const auto& row : noisy::train(cloud, reps, train.labels, cfg, evaluate)) {
        *csv << noisy::to_csv_row(row) << '\n';
      }
      zoo::save_weights(cloud, trn_out);
      const auto acc = evaluate(cloud);
      std::cerr << "B=" << bound << " clean_acc=" << acc.first << " perturbed_acc=" << acc.second << " wrote "
                << trn_out << '\n';
      return 0;
    }

    if (*srv) {
      std::vector<ModelSpec> specs;
      for (const auto& m : srv_models) specs.push_back(parse_model_spec(m));
      auto registry = std::make_shared<net::ModelRegistry>();
      load_models(*registry, specs, srv_arch);
      net::Server server(registry);
      server.start(net::bind_address(srv_bind));
      std::signal(SIGINT, on_stop);
      std::signal(SIGTERM, on_stop);
      std::signal(SIGHUP, on_reload);
      std::cerr << "serving " << specs.size() << " model(s) on " << server.endpoint().to_string() << '\n';
      while (!g_stop) {
        if (g_reload) {
          g_reload = 0;
          try {
            load_models(*registry, specs, srv_arch);
            std::cerr << "reloaded models\n";
          } catch (const std::exception& e) {
            std::cerr << "reload failed, keeping current models: " << e.what() << '\n';
          }
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
      }
      server.stop();
      return 0;
    }

    if (*inf) {
      ad::Network local = zoo::load_model(zoo::build_architecture("local-3"), inf_local);
      local.set_trainable(false);
      const zoo::Architecture cloud_arch = zoo::build_architecture("cloud-mid");
      const zoo::SplitModel split(std::move(local), zoo::instantiate(cloud_arch, 0), inf_layer);
      const auto test = load_split(inf_data, "t10k", inf_count);
      dp::PerturbationConfig pc;
      pc.diversity = inf_b;
      pc.nullification_rate = inf_mu;
      pc.injection_layer = inf_layer;
      pc.seed = common.seed;
      pc.bound = inf_bound ? *inf_bound : dp::calibrate_bound(split, load_split(inf_data, "train", 0).images, inf_layer);
      net::Client client(net::client_endpoint(inf_endpoint),
                         std::chrono::milliseconds(static_cast<long>(inf_timeout * 1000)));
      Rng rng(common.seed);
      std::size_t hit = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        const auto r = net::client_infer(test.images[i], split, pc, inf_model, client, rng);
        const std::size_t pred = argmax(Tensor({r.probabilities.size()}, r.probabilities));
        hit += pred == test.labels[i];
        std::cout << i << ",label=" << test.labels[i] << ",pred=" << pred << '\n';
      }
      std::cout << "accuracy=" << static_cast<double>(hit) / static_cast<double>(test.size()) << '\n';
      return 0;
    }

    if (*swp) {
      // Config file first, explicit flags win.
      bench::BenchConfig cfg;
      bench::ExperimentSpec spec;
      common.config.require_known(bench::bench_config_keys());
      bench::apply_config(common.config, cfg, spec);
      if (swp->count("--epochs")) cfg.epochs = swp_cfg.epochs;
      if (swp->count("--draws")) cfg.draws = swp_cfg.draws;
      if (swp->count("--parallel")) cfg.parallel = swp_cfg.parallel;
      if (swp->count("--etas")) spec.etas = swp_spec.etas;
      if (swp->count("--lambdas")) spec.lambdas = swp_spec.lambdas;
      if (swp->count("--bs")) spec.diversities = swp_spec.diversities;
      if (swp->count("--mus")) spec.nullification_rates = swp_spec.nullification_rates;
      if (swp->count("--layers")) spec.layers = swp_spec.layers;
      swp_cfg = cfg;
      swp_spec = spec;
      if (!common.config.has("seed") || app.count("--seed")) swp_spec.seed = common.seed;
      swp_spec.kind = bench::parse_kind(swp_kind);
      if (!swp_out.empty()) swp_spec.output = swp_out;
      auto train = load_split(swp_data, "train", swp_limit);
      auto test = load_split(swp_data, "t10k", swp_test_limit);
      bench::run_experiment(swp_spec, swp_cfg, std::move(train), std::move(test), &std::cout);
      return 0;
    }

    if (*bud) {
      double sigma = 0.0;
      dp::PrivacyBudgetReport rep;
      if (!bud_local.empty()) {
        ad::Network local = zoo::load_model(zoo::build_architecture("local-3"), bud_local);
        const zoo::SplitModel split(std::move(local), zoo::instantiate(zoo::build_architecture("cloud-mid"), 0),
                                    bud_layer);
        const auto train = load_split(bud_data, "train", 0);
        dp::PerturbationConfig pc;
        pc.diversity = bud_b;
        pc.nullification_rate = bud_mu;
        pc.injection_layer = bud_layer;
        pc.bound = bud_bound ? *bud_bound : dp::calibrate_bound(split, train.images, bud_layer);
        dp::LambdaOptions opts;
        opts.max_outputs = 4096;
        const std::span<const Tensor> calib(train.images.data(), std::min(bud_calib, train.size()));
        rep = dp::budget_for(split, pc, calib, opts);
      } else {
        if (bud_sigma) {
          sigma = *bud_sigma;
        } else if (bud_bound) {
          sigma = *bud_bound / bud_b;
        } else {
          throw ConfigError("budget needs --sigma, --bound or --local");
        }
        rep = dp::compute_budget(bud_mu, sigma, bud_lambda);
        if (!bud_sigma) {
          rep.diversity = bud_b;
          rep.bound = *bud_bound;
        }
      }
      std::cout << rep.to_text();
      return 0;
    }

    if (*ver) {
      Rng rng(common.seed);
      bool ok = true;
      double worst_slack = 0.0;
      for (std::size_t t = 0; t < ver_trials; ++t) {
        verify::ScalarMechanism m;
        m.bound = 0.1 + 10.0 * rng.uniform();
        m.noise_multiplier = 0.1 + 5.0 * rng.uniform();
        m.sigma = 0.01 + 3.0 * rng.uniform();
        std::vector<std::pair<std::size_t, std::size_t>> adj;
        for (std::size_t i = 0; i < 16; ++i) {
          m.values.push_back((2.0 * rng.uniform() - 1.0) * m.bound);
          if (i) adj.emplace_back(i - 1, i);
        }
        const auto r = verify::verify_laplace_ratio(m, adj);
        ok &= r.pass;
        worst_slack = std::max(worst_slack, r.worst_log_ratio - r.bound);
      }
      std::cout << "scaled_laplace trials=" << ver_trials << " max(ratio-bound)=" << worst_slack
                << (ok ? " PASS" : " FAIL") << '\n';
      bool ok2 = true;
      for (double mu : {0.0, 0.1, 0.25, 0.5, 0.9, 1.0}) {
        for (double eps : {0.1, 0.5, 1.0, 2.0, 4.0}) {
          const auto r = verify::verify_nullification_mixture(verify::randomized_response(eps, 2, 3), mu);
          ok2 &= r.pass;
          std::cout << "nullification mu=" << mu << " eps=" << eps << " measured=" << r.worst_log_ratio
                    << " bound=" << r.bound << (r.pass ? " PASS" : " FAIL") << '\n';
        }
      }
      return ok && ok2 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
