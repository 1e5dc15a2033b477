#pragma once

// Exact checks of the two building blocks of the budget formula:
//
//  * a bounded scalar map released as f(x) + a * Lap(B / sigma) is
//    (2 sigma / a)-DP; the supremum of the density ratio is computed
//    analytically for every adjacent pair.
//  * nullifying every item independently with probability mu turns an
//    eps-DP mechanism into a ln[(1 - mu) e^eps + mu]-DP one; checked on
//    finite mechanisms whose output probabilities are tabulated exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "arden/error.hpp"
#include "arden/rng.hpp"

namespace arden::verify {

inline constexpr double kRatioSlack = 1e-9;

struct RatioReport {
  double worst_log_ratio = 0.0;
  double bound = 0.0;
  bool pass = false;
  std::pair<std::size_t, std::size_t> witness{0, 0};
  bool precondition_violated = false;
  bool unbounded = false;
  std::string detail;

  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(17) << "worst_log_ratio=" << worst_log_ratio << '\n'
       << "bound=" << bound << '\n'
       << "pass=" << (pass ? "true" : "false") << '\n'
       << "witness=" << witness.first << ',' << witness.second << '\n'
       << "precondition_violated=" << (precondition_violated ? "true" : "false") << '\n'
       << "unbounded=" << (unbounded ? "true" : "false") << '\n';
    if (!detail.empty()) os << "detail=" << detail << '\n';
    return os.str();
  }
};

// --- scaled Laplace mechanism --------------------------------------------------

struct ScalarMechanism {
  std::vector<double> values;  // f(x) for each grid input
  double noise_multiplier = 1.0;  // a
  double sigma = 1.0;
  double bound = 1.0;  // B
};

// sup_S ln(p(S | f1) / p(S | f2)) for p(S | f) proportional to
// exp(-|S - f| sigma / (a B)). The exponent is piecewise linear in S with
// breakpoints at f1, f2, so the supremum is the largest of its values at the
// breakpoints and its two limits at +-infinity.
inline double laplace_log_ratio_sup(double f1, double f2, double a, double sigma, double bound) {
  const double k = sigma / (a * bound);
  auto exponent = [&](double s) { return k * (std::fabs(s - f2) - std::fabs(s - f1)); };
  const double tails = k * std::max(f1 - f2, f2 - f1);
  return std::max({exponent(f1), exponent(f2), tails});
}

inline RatioReport verify_laplace_ratio(const ScalarMechanism& mech,
                                     const std::vector<std::pair<std::size_t, std::size_t>>& adjacency) {
  if (!(mech.noise_multiplier > 0.0) || !(mech.sigma > 0.0) || !(mech.bound > 0.0)) {
    throw ConfigError("a, sigma and B must be positive");
  }
  RatioReport rep;
  rep.bound = 2.0 * mech.sigma / mech.noise_multiplier;
  for (std::size_t i = 0; i < mech.values.size(); ++i) {
    if (std::fabs(mech.values[i]) > mech.bound) {
      rep.precondition_violated = true;
      rep.pass = false;
      rep.witness = {i, i};
      rep.detail = "|f(x_" + std::to_string(i) + ")| exceeds B";
      return rep;
    }
  }
  for (const auto& [i, j] : adjacency) {
    if (i >= mech.values.size() || j >= mech.values.size()) {
      throw UsageError("adjacency pair outside the input grid");
    }
    const double r = std::max(
        laplace_log_ratio_sup(mech.values[i], mech.values[j], mech.noise_multiplier, mech.sigma, mech.bound),
        laplace_log_ratio_sup(mech.values[j], mech.values[i], mech.noise_multiplier, mech.sigma, mech.bound));
    if (r > rep.worst_log_ratio) {
      rep.worst_log_ratio = r;
      rep.witness = {i, j};
    }
  }
  rep.pass = rep.worst_log_ratio <= rep.bound + kRatioSlack;
  return rep;
}

// --- nullification amplification -----------------------------------------------

// Finite mechanism over inputs in {0..alphabet-1}^items; item value 0 is what
// nullification writes. Probabilities stored row-major [input][output].
struct DiscreteMechanism {
  std::size_t items = 1;
  std::size_t alphabet = 2;
  std::size_t outputs = 2;
  std::vector<double> table;

  std::size_t input_count() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < items; ++i) n *= alphabet;
    return n;
  }
  double prob(std::size_t input, std::size_t output) const { return table[input * outputs + output]; }

  std::size_t item(std::size_t input, std::size_t i) const {
    for (std::size_t k = 0; k < i; ++k) input /= alphabet;
    return input % alphabet;
  }
  std::size_t with_item(std::size_t input, std::size_t i, std::size_t value) const {
    std::size_t place = 1;
    for (std::size_t k = 0; k < i; ++k) place *= alphabet;
    return input - item(input, i) * place + value * place;
  }

  void validate() const {
    if (items == 0 || alphabet < 2 || outputs == 0) throw ConfigError("degenerate discrete mechanism");
    if (table.size() != input_count() * outputs) throw ConfigError("probability table has the wrong size");
    for (std::size_t x = 0; x < input_count(); ++x) {
      double s = 0.0;
      for (std::size_t o = 0; o < outputs; ++o) {
        if (!(prob(x, o) >= 0.0)) throw ConfigError("negative probability");
        s += prob(x, o);
      }
      if (std::fabs(s - 1.0) > 1e-9) throw ConfigError("probability rows must sum to 1");
    }
  }
};

// Every pair of inputs that differ in exactly one item, as (x, x', item).
inline std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> adjacent_pairs(
    const DiscreteMechanism& m) {
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> out;
  for (std::size_t x = 0; x < m.input_count(); ++x) {
    for (std::size_t i = 0; i < m.items; ++i) {
      for (std::size_t v = 0; v < m.alphabet; ++v) {
        const std::size_t y = m.with_item(x, i, v);
        if (y != x) out.emplace_back(x, y, i);
      }
    }
  }
  return out;
}

namespace detail {

// Worst ln(p1/p2) over outputs; nullopt when p1 > 0 where p2 == 0.
inline std::optional<double> worst_row_ratio(const std::vector<double>& p1, const std::vector<double>& p2) {
  double worst = 0.0;
  for (std::size_t o = 0; o < p1.size(); ++o) {
    if (p1[o] == 0.0) continue;
    if (p2[o] == 0.0) return std::nullopt;
    worst = std::max(worst, std::log(p1[o] / p2[o]));
  }
  return worst;
}

}  // namespace detail

// Exact epsilon of a finite mechanism, or nullopt when some ratio is unbounded.
inline std::optional<double> exact_epsilon(const DiscreteMechanism& m) {
  m.validate();
  double eps = 0.0;
  for (const auto& [x, y, i] : adjacent_pairs(m)) {
    (void)i;
    std::vector<double> px(m.outputs), py(m.outputs);
    for (std::size_t o = 0; o < m.outputs; ++o) {
      px[o] = m.prob(x, o);
      py[o] = m.prob(y, o);
    }
    const auto r = detail::worst_row_ratio(px, py);
    if (!r) return std::nullopt;
    eps = std::max(eps, *r);
  }
  return eps;
}

// ln[(1 - mu) e^eps + mu].
inline double nullification_budget(double eps, double mu) {
  return std::log((1.0 - mu) * std::exp(eps) + mu);
}

// Builds the nullified mechanism exactly: for an adjacent pair (x1, x2)
// differing in item i, and any fixed nullification pattern of the other items,
// item i is zeroed with probability mu and kept with probability 1 - mu:
//   P'(S | x) = mu * P(S | x with i zeroed) + (1 - mu) * P(S | x).
// The worst log ratio over all pairs, patterns and outputs is compared with
// ln[(1 - mu) e^eps + mu] for the mechanism's exact eps.
inline RatioReport verify_nullification_mixture(const DiscreteMechanism& base, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("nullification rate must lie in [0,1]");
  base.validate();
  RatioReport rep;
  const auto eps = exact_epsilon(base);
  if (!eps) {
    rep.unbounded = true;
    rep.pass = false;
    rep.worst_log_ratio = std::numeric_limits<double>::infinity();
    rep.bound = std::numeric_limits<double>::infinity();
    rep.detail = "unbounded ratio: an output has zero probability under only one of two adjacent inputs";
    return rep;
  }
  rep.bound = nullification_budget(*eps, mu);

  auto nullified_row = [&](std::size_t x, std::size_t i) {
    const std::size_t xz = base.with_item(x, i, 0);
    std::vector<double> p(base.outputs);
    for (std::size_t o = 0; o < base.outputs; ++o) {
      p[o] = mu * base.prob(xz, o) + (1.0 - mu) * base.prob(x, o);
    }
    return p;
  };

  const std::size_t patterns = std::size_t{1} << (base.items - 1);
  for (const auto& [x1, x2, i] : adjacent_pairs(base)) {
    for (std::size_t pat = 0; pat < patterns; ++pat) {
      std::size_t a = x1, b = x2;
      for (std::size_t k = 0, bit = 0; k < base.items; ++k) {
        if (k == i) continue;
        if (pat >> bit++ & 1u) {
          a = base.with_item(a, k, 0);
          b = base.with_item(b, k, 0);
        }
      }
      const auto r = detail::worst_row_ratio(nullified_row(a, i), nullified_row(b, i));
      if (!r) {
        rep.unbounded = true;
        rep.pass = false;
        rep.worst_log_ratio = std::numeric_limits<double>::infinity();
        rep.witness = {x1, x2};
        return rep;
      }
      if (*r > rep.worst_log_ratio) {
        rep.worst_log_ratio = *r;
        rep.witness = {x1, x2};
      }
    }
  }
  rep.pass = rep.worst_log_ratio <= rep.bound + kRatioSlack;
  return rep;
}

// Each item independently reported truthfully with probability
// e^eps / (e^eps + k - 1), otherwise as one of the other k - 1 symbols.
inline DiscreteMechanism randomized_response(double eps, std::size_t items = 1, std::size_t alphabet = 2) {
  if (!(eps >= 0.0)) throw ConfigError("epsilon must be non-negative");
  DiscreteMechanism m;
  m.items = items;
  m.alphabet = alphabet;
  m.outputs = m.input_count();
  m.table.assign(m.outputs * m.outputs, 0.0);
  const double keep = std::exp(eps) / (std::exp(eps) + static_cast<double>(alphabet) - 1.0);
  const double flip = 1.0 / (std::exp(eps) + static_cast<double>(alphabet) - 1.0);
  for (std::size_t x = 0; x < m.input_count(); ++x) {
    for (std::size_t s = 0; s < m.outputs; ++s) {
      double p = 1.0;
      for (std::size_t i = 0; i < items; ++i) p *= m.item(x, i) == m.item(s, i) ? keep : flip;
      m.table[x * m.outputs + s] = p;
    }
  }
  return m;
}

// Random strictly positive tables, for property trials.
inline DiscreteMechanism random_mechanism(std::size_t items, std::size_t alphabet, std::size_t outputs, Rng& rng) {
  DiscreteMechanism m;
  m.items = items;
  m.alphabet = alphabet;
  m.outputs = outputs;
  m.table.resize(m.input_count() * outputs);
  for (std::size_t x = 0; x < m.input_count(); ++x) {
    double s = 0.0;
    for (std::size_t o = 0; o < outputs; ++o) s += m.table[x * outputs + o] = 0.05 + rng.uniform();
    for (std::size_t o = 0; o < outputs; ++o) m.table[x * outputs + o] /= s;
  }
  return m;
}

}  // namespace arden::verify
