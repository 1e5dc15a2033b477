#pragma once

// Device-side private transformation and its privacy budget.
//
//   x'_s  = x_s * I_n                      (nullification)
//   x_l   = M_l(x'_s)                      (head of the local network)
//   x'_l  = x_l / max(1, |x_l|_inf / B)    (norm bounding)
//   x~_r  = tail(x'_l + Lap(b))            (noise, rest of the local network)
//
// The Laplace scale b relates to the budget's noise parameter by sigma = B/b.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/error.hpp"
#include "arden/model_zoo.hpp"
#include "arden/rng.hpp"
#include "arden/tensor.hpp"

namespace arden::dp {

struct PerturbationConfig {
  double nullification_rate = 0.1;  // mu
  double diversity = 5.0;           // b, the Laplace scale
  double bound = 1.0;               // B
  std::size_t injection_layer = 3;  // l
  std::optional<std::vector<std::size_t>> user_mask;
  std::uint64_t seed = 0;

  double sigma() const { return bound / diversity; }
};

inline void validate(const PerturbationConfig& c, const zoo::SplitModel& model) {
  if (!(c.nullification_rate >= 0.0 && c.nullification_rate <= 1.0)) {
    throw ConfigError("nullification rate must lie in [0,1]");
  }
  if (!(c.diversity > 0.0) || !std::isfinite(c.diversity)) {
    throw ConfigError("Laplace diversity b must be positive");
  }
  if (!(c.bound > 0.0) || !std::isfinite(c.bound)) throw ConfigError("bound B must be positive");
  if (c.injection_layer > model.local().size()) {
    throw ConfigError("injection layer " + std::to_string(c.injection_layer) +
                      " outside local network of " + std::to_string(model.local().size()) +
                      " layers");
  }
}

// Binary tensor, 0 marks a nullified item.
class NullificationMask {
 public:
  explicit NullificationMask(Tensor bits) : bits_(std::move(bits)) {
    for (float v : bits_.data()) {
      if (v != 0.0f && v != 1.0f) throw UsageError("nullification mask entries must be 0 or 1");
    }
  }
  const Tensor& bits() const noexcept { return bits_; }
  const Shape& shape() const noexcept { return bits_.shape(); }
  std::size_t zeros() const {
    return static_cast<std::size_t>(std::count(bits_.data().begin(), bits_.data().end(), 0.0f));
  }

 private:
  Tensor bits_;
};

// ceil(n * mu), treating products within rounding error of an integer as
// that integer (e.g. 10 * 0.3 is 3, not 4).
inline std::size_t nullified_count(std::size_t n, double mu) {
  const double v = static_cast<double>(n) * mu;
  const double r = std::round(v);
  if (std::fabs(v - r) <= 1e-9 * std::max(1.0, v)) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(v));
}

inline NullificationMask generate_mask(const Shape& shape, double mu, Rng& rng,
                                       const std::optional<std::vector<std::size_t>>& user = {}) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("nullification rate must lie in [0,1]");
  const std::size_t n = shape_size(shape);
  const std::size_t k = nullified_count(n, mu);
  Tensor bits(shape, 1.0f);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::size_t fixed = 0;
  if (user) {
    std::vector<std::size_t> idx = *user;
    std::sort(idx.begin(), idx.end());
    if (std::adjacent_find(idx.begin(), idx.end()) != idx.end()) {
      throw ConfigError("user nullification indices contain duplicates");
    }
    if (!idx.empty() && idx.back() >= n) {
      throw ConfigError("user nullification index " + std::to_string(idx.back()) +
                        " out of bounds for " + std::to_string(n) + " items");
    }
    if (idx.size() > k) {
      throw ConfigError("user mask nullifies " + std::to_string(idx.size()) +
                        " items, more than the agreed ceil(N*mu) = " + std::to_string(k));
    }
    // Move user indices to the front of the pool, sampling extras after them.
    for (std::size_t i : idx) {
      std::swap(pool[fixed], pool[static_cast<std::size_t>(
                                 std::find(pool.begin() + static_cast<std::ptrdiff_t>(fixed),
                                           pool.end(), i) -
                                 pool.begin())]);
      ++fixed;
    }
  }
  // Partial Fisher-Yates over the remaining positions.
  for (std::size_t j = fixed; j < k; ++j) {
    const std::size_t pick = j + static_cast<std::size_t>(rng.below(n - j));
    std::swap(pool[j], pool[pick]);
  }
  for (std::size_t j = 0; j < k; ++j) bits[pool[j]] = 0.0f;
  return NullificationMask(std::move(bits));
}

inline NullificationMask generate_mask(const Shape& shape, double mu, std::uint64_t seed,
                                       const std::optional<std::vector<std::size_t>>& user = {}) {
  Rng rng(seed);
  return generate_mask(shape, mu, rng, user);
}

inline Tensor nullify(const Tensor& x, const NullificationMask& mask) {
  if (x.shape() != mask.shape()) {
    throw UsageError("mask shape " + shape_string(mask.shape()) + " does not match input " +
                     shape_string(x.shape()));
  }
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask.bits()[i];
  return out;
}

// Scales x so that |x|_inf <= B; returned unchanged when already within.
inline Tensor bound_norm(const Tensor& x, double bound) {
  if (!(bound > 0.0)) throw ConfigError("bound B must be positive");
  const double norm = max_abs(x);
  if (norm <= bound) return x;
  const double scale = bound / norm;
  // Largest float not above B; rounding to float may otherwise overshoot.
  float cap = static_cast<float>(bound);
  if (static_cast<double>(cap) > bound) cap = std::nextafter(cap, 0.0f);
  Tensor out = x;
  for (float& v : out.data()) {
    v = static_cast<float>(static_cast<double>(v) * scale);
    if (std::fabs(v) > cap) v = std::copysign(cap, v);
  }
  return out;
}

// Median; mean of the two middle values for even counts.
inline double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// B = median over the calibration set of |M_l(x)|_inf.
inline double calibrate_bound(const zoo::SplitModel& model, std::span<const Tensor> inputs,
                              std::size_t injection_layer) {
  if (inputs.empty()) throw DataError("calibration set is empty");
  if (injection_layer > model.local().size()) throw ConfigError("injection layer out of range");
  const auto head = model.local().layers().first(injection_layer);
  std::vector<double> norms;
  norms.reserve(inputs.size());
  for (const Tensor& x : inputs) norms.push_back(max_abs(ad::forward(head, x)));
  const double b = median(std::move(norms));
  if (!(b > 0.0)) {
    throw DataError("degenerate bound: calibrated B = " + std::to_string(b) + " (must be positive)");
  }
  return b;
}

// Smallest / largest uniform draw fed to the inverse CDF.
inline constexpr double kLaplaceUniformFloor = 0x1.0p-33;

// Inverse CDF: s * sign(u - 1/2) * ln(1 - 2|u - 1/2|).
inline double laplace_from_uniform(double u, double scale) {
  u = std::clamp(u, kLaplaceUniformFloor, 1.0 - kLaplaceUniformFloor);
  const double c = u - 0.5;
  const double sign = c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0);
  return scale * sign * std::log(1.0 - 2.0 * std::fabs(c));
}

inline Tensor sample_laplace(const Shape& shape, double scale, Rng& rng) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("Laplace scale must be positive");
  Tensor out(shape);
  for (float& v : out.data()) v = static_cast<float>(laplace_from_uniform(rng.uniform(), scale));
  return out;
}

inline Tensor sample_laplace(const Shape& shape, double scale, std::uint64_t seed) {
  Rng rng(seed);
  return sample_laplace(shape, scale, rng);
}

// Output of the private transformation; the only representation type the
// transport layer accepts.
class PerturbedRepresentation {
 public:
  const Tensor& tensor() const noexcept { return value_; }
  const Shape& shape() const noexcept { return value_.shape(); }

 private:
  explicit PerturbedRepresentation(Tensor t) : value_(std::move(t)) {}
  friend PerturbedRepresentation transform_impl(const Tensor&, const zoo::SplitModel&,
                                                const PerturbationConfig&, Rng&, bool);
  friend struct RepresentationAccess;
  Tensor value_;
};

// Decoders on the receiving side rebuild representations that already left a
// device; nothing else may mint one.
struct RepresentationAccess {
  static PerturbedRepresentation from_wire(Tensor t) { return PerturbedRepresentation(std::move(t)); }
};

struct TransformHooks {
  bool suppress_noise = false;  // test hook: noise tensor forced to zero
};

inline PerturbedRepresentation transform_impl(const Tensor& x_s, const zoo::SplitModel& model,
                                              const PerturbationConfig& config, Rng& rng,
                                              bool suppress_noise) {
  validate(config, model);
  if (x_s.shape() != model.local().input_shape()) {
    throw UsageError("input shape " + shape_string(x_s.shape()) + " does not match local input " +
                     shape_string(model.local().input_shape()));
  }
  const auto layers = model.local().layers();
  const NullificationMask mask = generate_mask(x_s.shape(), config.nullification_rate, rng, config.user_mask);
  const Tensor x_l = ad::forward(layers.first(config.injection_layer), nullify(x_s, mask));
  Tensor x = bound_norm(x_l, config.bound);
  if (!suppress_noise) x = x + sample_laplace(x.shape(), config.diversity, rng);
  return PerturbedRepresentation(ad::forward(layers.subspan(config.injection_layer), x));
}

inline PerturbedRepresentation transform(const Tensor& x_s, const zoo::SplitModel& model,
                                         const PerturbationConfig& config, Rng& rng,
                                         TransformHooks hooks = {}) {
  return transform_impl(x_s, model, config, rng, hooks.suppress_noise);
}

// Draws mask and noise from a generator seeded with config.seed.
inline PerturbedRepresentation transform(const Tensor& x_s, const zoo::SplitModel& model,
                                         const PerturbationConfig& config,
                                         TransformHooks hooks = {}) {
  Rng rng(config.seed);
  return transform_impl(x_s, model, config, rng, hooks.suppress_noise);
}

// --- sensitivity of the post-injection layers --------------------------------

enum class LambdaNorm {
  kMaxEntry,   // max_ij |J_ij|
  kInducedInf  // max_i sum_j |J_ij|
};

struct LambdaOptions {
  std::size_t max_outputs = 256;
  LambdaNorm norm = LambdaNorm::kMaxEntry;
};

struct LambdaEstimate {
  double max_entry = 1.0;
  double induced_inf = 1.0;
  LambdaNorm selected = LambdaNorm::kMaxEntry;
  bool identity = true;

  double value() const { return selected == LambdaNorm::kMaxEntry ? max_entry : induced_inf; }
};

// Gradient of sum(seed * tail(x)) with respect to x; parameters are not touched.
inline Tensor input_gradient(std::span<const ad::Layer> layers, const Tensor& x, const Tensor& seed) {
  ad::Tape tape;
  ad::forward(layers, x, tape);
  // accumulate=false never writes through the layers.
  std::span<ad::Layer> mutable_layers(const_cast<ad::Layer*>(layers.data()), layers.size());
  return ad::backward(mutable_layers, tape, seed, false);
}

// Jacobian of the tail at each bounded calibration representation, one
// backward pass per output component.
inline LambdaEstimate estimate_lambda(const zoo::SplitModel& model, std::span<const Tensor> inputs,
                                      std::size_t injection_layer, double bound,
                                      LambdaOptions options = {}) {
  if (inputs.empty()) throw DataError("calibration set is empty");
  if (injection_layer > model.local().size()) throw ConfigError("injection layer out of range");
  LambdaEstimate est;
  est.selected = options.norm;
  const auto layers = model.local().layers();
  const auto head = layers.first(injection_layer);
  const auto tail = layers.subspan(injection_layer);
  if (tail.empty()) return est;
  const Shape in_shape = ad::infer_shape(head, model.local().input_shape());
  const Shape out_shape = ad::infer_shape(tail, in_shape);
  const std::size_t outputs = shape_size(out_shape);
  if (outputs > options.max_outputs) {
    throw ConfigError("Jacobian too large: " + std::to_string(outputs) + " outputs exceed the cap of " +
                      std::to_string(options.max_outputs) +
                      "; inject at the last local layer instead");
  }
  est.identity = false;
  est.max_entry = 0.0;
  est.induced_inf = 0.0;
  for (const Tensor& x : inputs) {
    const Tensor xb = bound_norm(ad::forward(head, x), bound);
    for (std::size_t i = 0; i < outputs; ++i) {
      Tensor seed(out_shape);
      seed[i] = 1.0f;
      const Tensor row = input_gradient(tail, xb, seed);
      double row_sum = 0.0;
      for (float v : row.data()) {
        est.max_entry = std::max(est.max_entry, static_cast<double>(std::fabs(v)));
        row_sum += std::fabs(v);
      }
      est.induced_inf = std::max(est.induced_inf, row_sum);
    }
  }
  return est;
}

// --- budget -------------------------------------------------------------------

struct PrivacyBudgetReport {
  double epsilon = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  double lambda = 1.0;
  double diversity = 0.0;  // b; 0 when not known
  double bound = 0.0;      // B; 0 when not known
  std::size_t layer = 0;
  std::size_t calibration_size = 0;
  bool approximate = false;  // first-order bound for a non-identity tail
  std::optional<double> lambda_induced_inf;

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "epsilon=" << epsilon << '\n'
       << "mu=" << mu << '\n'
       << "sigma=" << sigma << '\n'
       << "b=" << diversity << '\n'
       << "B=" << bound << '\n'
       << "lambda=" << lambda << '\n'
       << "l=" << layer << '\n'
       << "calibration_size=" << calibration_size << '\n'
       << "approximate=" << (approximate ? "true" : "false") << '\n';
    if (lambda_induced_inf) os << "lambda_induced_inf=" << *lambda_induced_inf << '\n';
    return os.str();
  }
};

// epsilon = ln[(1 - mu) e^{2 sigma / Lambda} + mu], evaluated as
// t + log1p(-mu (1 - e^{-t})) with t = 2 sigma / Lambda so that mu = 0 gives
// exactly t and large t does not overflow.
inline PrivacyBudgetReport compute_budget(double mu, double sigma, double lambda) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("nullification rate must lie in [0,1]");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be non-negative");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("Lambda must be positive");
  PrivacyBudgetReport r;
  r.mu = mu;
  r.sigma = sigma;
  r.lambda = lambda;
  if (mu == 1.0) {
    r.epsilon = 0.0;
    return r;
  }
  const double t = 2.0 * sigma / lambda;
  r.epsilon = t + std::log1p(mu * std::expm1(-t));
  if (r.epsilon < 0.0) r.epsilon = 0.0;
  return r;
}

// Budget of a transformation: calibrated Lambda at the configured layer, with
// sigma = B / b.
inline PrivacyBudgetReport budget_for(const zoo::SplitModel& model, const PerturbationConfig& config,
                                      std::span<const Tensor> calibration, LambdaOptions options = {}) {
  validate(config, model);
  const LambdaEstimate lam =
      estimate_lambda(model, calibration, config.injection_layer, config.bound, options);
  PrivacyBudgetReport r = compute_budget(config.nullification_rate, config.sigma(), lam.value());
  r.diversity = config.diversity;
  r.bound = config.bound;
  r.layer = config.injection_layer;
  r.calibration_size = calibration.size();
  r.approximate = !lam.identity;
  if (!lam.identity) r.lambda_induced_inf = lam.induced_inf;
  return r;
}

}  // namespace arden::dp
