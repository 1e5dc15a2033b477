#pragma once

// Reverse-mode differentiation over a fixed set of layer primitives.
//
// A network is an ordered list of layers applied to one sample at a time.
// Forward passes optionally record a Tape; backward replays the tape in
// reverse, accumulating parameter gradients and returning the gradient with
// respect to the network input.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "arden/error.hpp"
#include "arden/rng.hpp"
#include "arden/tensor.hpp"

namespace arden::ad {

struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}
};

namespace detail {

// Fixed-order accumulation in 8 lanes; deterministic and vectorizable.
inline float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

inline void axpy(float* y, const float* x, float a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace detail

enum class Padding { kSame, kValid };

// Per-layer record kept on the tape.
struct TapeEntry {
  std::size_t layer = 0;
  Tensor input;
  Tensor output;
  std::vector<std::uint32_t> argmax;  // max-pool routing
  std::optional<std::size_t> target;  // fused cross-entropy label
};

// Affine map y = W x + b over the flattened input. W is (out, in).
struct Dense {
  static constexpr std::string_view kKind = "dense";
  Parameter weight;
  Parameter bias;

  Dense(std::size_t in, std::size_t out)
      : weight(Tensor({out, in})), bias(Tensor({out})) {}

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  std::string check_input(const Shape& in) const {
    if (shape_size(in) != in_features()) {
      return "expects " + std::to_string(in_features()) + " inputs, got " +
             shape_string(in);
    }
    return {};
  }
  Shape output_shape(const Shape&) const { return {out_features()}; }

  Tensor forward(const Tensor& x, TapeEntry*) const {
    const std::size_t n = in_features(), m = out_features();
    Tensor y({m});
    const float* w = weight.value.raw();
    for (std::size_t o = 0; o < m; ++o) {
      y[o] = bias.value[o] + detail::dot(w + o * n, x.raw(), n);
    }
    return y;
  }

  Tensor backward(const TapeEntry& e, const Tensor& gy, bool accumulate) {
    const std::size_t n = in_features(), m = out_features();
    Tensor gx(e.input.shape());
    const float* w = weight.value.raw();
    for (std::size_t o = 0; o < m; ++o) {
      detail::axpy(gx.raw(), w + o * n, gy[o], n);
    }
    if (accumulate) {
      float* gw = weight.grad.raw();
      for (std::size_t o = 0; o < m; ++o) {
        detail::axpy(gw + o * n, e.input.raw(), gy[o], n);
        bias.grad[o] += gy[o];
      }
    }
    return gx;
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(weight);
    f(bias);
  }
  template <typename F>
  void for_each_parameter(F&& f) const {
    f(weight);
    f(bias);
  }
};

// 2-D convolution, stride 1, square odd kernel. Input (C,H,W), weight
// (O,C,k,k), output (O,H',W').
struct Conv2D {
  static constexpr std::string_view kKind = "conv";
  Parameter weight;
  Parameter bias;
  Padding padding = Padding::kSame;

  Conv2D(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         Padding pad)
      : weight(Tensor({out_channels, in_channels, kernel, kernel})),
        bias(Tensor({out_channels})),
        padding(pad) {
    if (kernel % 2 == 0) throw ConfigError("conv kernel size must be odd");
  }

  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t out_channels() const { return weight.value.dim(0); }
  std::size_t kernel() const { return weight.value.dim(2); }
  std::size_t pad() const { return padding == Padding::kSame ? kernel() / 2 : 0; }

  std::string check_input(const Shape& in) const {
    if (in.size() != 3 || in[0] != in_channels()) {
      return "expects (" + std::to_string(in_channels()) + "xHxW) input, got " +
             shape_string(in);
    }
    if (padding == Padding::kValid && (in[1] < kernel() || in[2] < kernel())) {
      return "input " + shape_string(in) + " smaller than kernel";
    }
    return {};
  }
  Shape output_shape(const Shape& in) const {
    if (padding == Padding::kSame) return {out_channels(), in[1], in[2]};
    return {out_channels(), in[1] - kernel() + 1, in[2] - kernel() + 1};
  }

  // Calls f(out_offset, in_offset, n, weight_index) for every contiguous run of
  // the sliding-window product; shared by forward and both backward passes.
  template <typename F>
  void for_each_run(const Shape& in, F&& f) const {
    const std::size_t C = in[0], H = in[1], W = in[2];
    const Shape os = output_shape(in);
    const std::size_t Ho = os[1], Wo = os[2];
    const std::size_t k = kernel();
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad());
    for (std::size_t o = 0; o < out_channels(); ++o) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - p;
          const std::ptrdiff_t oy0 = std::max<std::ptrdiff_t>(0, -dy);
          const std::ptrdiff_t oy1 = std::min<std::ptrdiff_t>(
              static_cast<std::ptrdiff_t>(Ho), static_cast<std::ptrdiff_t>(H) - dy);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
            const std::ptrdiff_t ox0 = std::max<std::ptrdiff_t>(0, -dx);
            const std::ptrdiff_t ox1 = std::min<std::ptrdiff_t>(
                static_cast<std::ptrdiff_t>(Wo), static_cast<std::ptrdiff_t>(W) - dx);
            if (ox1 <= ox0) continue;
            const std::size_t n = static_cast<std::size_t>(ox1 - ox0);
            const std::size_t widx = ((o * C + c) * k + ky) * k + kx;
            for (std::ptrdiff_t oy = oy0; oy < oy1; ++oy) {
              const std::size_t out_off = (o * Ho + static_cast<std::size_t>(oy)) * Wo +
                                          static_cast<std::size_t>(ox0);
              const std::size_t in_off =
                  (c * H + static_cast<std::size_t>(oy + dy)) * W +
                  static_cast<std::size_t>(ox0 + dx);
              f(out_off, in_off, n, widx);
            }
          }
        }
      }
    }
  }

  Tensor forward(const Tensor& x, TapeEntry*) const {
    const Shape os = output_shape(x.shape());
    Tensor y(os);
    const std::size_t plane = os[1] * os[2];
    for (std::size_t o = 0; o < os[0]; ++o) {
      std::fill(y.raw() + o * plane, y.raw() + (o + 1) * plane, bias.value[o]);
    }
    const float* w = weight.value.raw();
    const float* in = x.raw();
    float* out = y.raw();
    for_each_run(x.shape(), [&](std::size_t oo, std::size_t io, std::size_t n,
                                std::size_t wi) {
      detail::axpy(out + oo, in + io, w[wi], n);
    });
    return y;
  }

  Tensor backward(const TapeEntry& e, const Tensor& gy, bool accumulate) {
    Tensor gx(e.input.shape());
    const float* w = weight.value.raw();
    const float* g = gy.raw();
    const float* in = e.input.raw();
    float* gxi = gx.raw();
    float* gw = weight.grad.raw();
    for_each_run(e.input.shape(), [&](std::size_t oo, std::size_t io,
                                      std::size_t n, std::size_t wi) {
      detail::axpy(gxi + io, g + oo, w[wi], n);
      if (accumulate) gw[wi] += detail::dot(g + oo, in + io, n);
    });
    if (accumulate) {
      const std::size_t plane = gy.size() / out_channels();
      for (std::size_t o = 0; o < out_channels(); ++o) {
        float s = 0.0f;
        for (std::size_t i = 0; i < plane; ++i) s += g[o * plane + i];
        bias.grad[o] += s;
      }
    }
    return gx;
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(weight);
    f(bias);
  }
  template <typename F>
  void for_each_parameter(F&& f) const {
    f(weight);
    f(bias);
  }
};

struct Relu {
  static constexpr std::string_view kKind = "relu";

  std::string check_input(const Shape&) const { return {}; }
  Shape output_shape(const Shape& in) const { return in; }

  Tensor forward(const Tensor& x, TapeEntry*) const {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    return y;
  }
  Tensor backward(const TapeEntry& e, const Tensor& gy, bool) {
    Tensor gx(gy.shape());
    for (std::size_t i = 0; i < gy.size(); ++i) {
      gx[i] = e.input[i] > 0.0f ? gy[i] : 0.0f;
    }
    return gx;
  }
  template <typename F>
  void for_each_parameter(F&&) const {}
};

// 2x2 max-pooling, stride 2. Odd trailing rows/columns are dropped. Ties route
// the gradient to the first maximal element in row-major window order.
struct MaxPool2 {
  static constexpr std::string_view kKind = "maxpool";

  std::string check_input(const Shape& in) const {
    if (in.size() != 3 || in[1] < 2 || in[2] < 2) {
      return "expects (CxHxW) input with H,W >= 2, got " + shape_string(in);
    }
    return {};
  }
  Shape output_shape(const Shape& in) const { return {in[0], in[1] / 2, in[2] / 2}; }

  Tensor forward(const Tensor& x, TapeEntry* e) const {
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor y({C, Ho, Wo});
    if (e) e->argmax.resize(y.size());
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          std::size_t best = (c * H + 2 * oy) * W + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t i = (c * H + 2 * oy + dy) * W + 2 * ox + dx;
              if (x[i] > x[best]) best = i;
            }
          }
          const std::size_t j = (c * Ho + oy) * Wo + ox;
          y[j] = x[best];
          if (e) e->argmax[j] = static_cast<std::uint32_t>(best);
        }
      }
    }
    return y;
  }
  Tensor backward(const TapeEntry& e, const Tensor& gy, bool) {
    Tensor gx(e.input.shape());
    for (std::size_t j = 0; j < gy.size(); ++j) gx[e.argmax[j]] += gy[j];
    return gx;
  }
  template <typename F>
  void for_each_parameter(F&&) const {}
};

// Softmax over the flattened input. When the tape carries a target label the
// backward pass uses the fused cross-entropy gradient p - onehot(label).
struct SoftmaxXent {
  static constexpr std::string_view kKind = "softmax-xent";

  std::string check_input(const Shape&) const { return {}; }
  Shape output_shape(const Shape& in) const { return {shape_size(in)}; }

  Tensor forward(const Tensor& x, TapeEntry*) const {
    Tensor y({x.size()});
    double m = -INFINITY;
    for (float v : x.data()) m = std::max(m, static_cast<double>(v));
    double sum = 0.0;
    std::vector<double> e(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      e[i] = std::exp(static_cast<double>(x[i]) - m);
      sum += e[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(e[i] / sum);
    return y;
  }
  Tensor backward(const TapeEntry& e, const Tensor& gy, bool) {
    const Tensor& p = e.output;
    std::vector<float> gx(p.size());
    if (e.target) {
      const float s = gy[0];
      for (std::size_t i = 0; i < p.size(); ++i) {
        gx[i] = s * (p[i] - (i == *e.target ? 1.0f : 0.0f));
      }
    } else {
      double gp = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) gp += static_cast<double>(gy[i]) * p[i];
      for (std::size_t i = 0; i < p.size(); ++i) {
        gx[i] = static_cast<float>(p[i] * (gy[i] - gp));
      }
    }
    return Tensor(e.input.shape(), std::move(gx));
  }
  template <typename F>
  void for_each_parameter(F&&) const {}
};

using Layer = std::variant<Dense, Conv2D, Relu, MaxPool2, SoftmaxXent>;

inline std::string_view kind_of(const Layer& layer) {
  return std::visit([](const auto& l) { return l.kKind; }, layer);
}

template <typename F>
void for_each_parameter(Layer& layer, F&& f) {
  std::visit([&](auto& l) { l.for_each_parameter(f); }, layer);
}
template <typename F>
void for_each_parameter(const Layer& layer, F&& f) {
  std::visit([&](const auto& l) { l.for_each_parameter(f); }, layer);
}

// Output shape of running `layers` on `in`; throws ConfigError naming the
// offending pair of layers on mismatch.
inline Shape infer_shape(std::span<const Layer> layers, Shape in) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string why =
        std::visit([&](const auto& l) { return l.check_input(in); }, layers[i]);
    if (!why.empty()) {
      std::string producer =
          i == 0 ? std::string("input")
                 : "layer " + std::to_string(i - 1) + " (" +
                       std::string(kind_of(layers[i - 1])) + ")";
      throw ConfigError("shape mismatch between " + producer + " and layer " +
                        std::to_string(i) + " (" + std::string(kind_of(layers[i])) +
                        "): " + why);
    }
    in = std::visit([&](const auto& l) { return l.output_shape(in); }, layers[i]);
  }
  return in;
}

class Tape {
 public:
  bool recorded() const noexcept { return recorded_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<TapeEntry>& entries() const noexcept { return entries_; }
  bool has_loss() const noexcept { return loss_.has_value(); }
  float loss() const { return loss_.value(); }

  void clear() {
    entries_.clear();
    base_ = nullptr;
    count_ = 0;
    recorded_ = false;
    loss_.reset();
  }

 private:
  friend Tensor forward(std::span<const Layer>, const Tensor&, Tape&);
  friend Tensor backward(std::span<Layer>, Tape&, const Tensor&, bool);
  friend float attach_cross_entropy(Tape&, std::size_t);

  std::vector<TapeEntry> entries_;
  const Layer* base_ = nullptr;
  std::size_t count_ = 0;
  Shape input_shape_;
  Shape output_shape_;
  bool recorded_ = false;
  std::optional<float> loss_;
};

// Forward pass without recording; safe to call concurrently on shared layers.
inline Tensor forward(std::span<const Layer> layers, const Tensor& input) {
  infer_shape(layers, input.shape());
  Tensor x = input;
  for (const Layer& layer : layers) {
    x = std::visit([&](const auto& l) { return l.forward(x, nullptr); }, layer);
  }
  return x;
}

inline Tensor forward(std::span<const Layer> layers, const Tensor& input, Tape& tape) {
  infer_shape(layers, input.shape());
  tape.clear();
  tape.entries_.reserve(layers.size());
  Tensor x = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    TapeEntry e;
    e.layer = i;
    e.input = x;
    x = std::visit([&](const auto& l) { return l.forward(x, &e); }, layers[i]);
    e.output = x;
    tape.entries_.push_back(std::move(e));
  }
  tape.base_ = layers.data();
  tape.count_ = layers.size();
  tape.input_shape_ = input.shape();
  tape.output_shape_ = x.shape();
  tape.recorded_ = true;
  return x;
}

// Turns a recorded forward ending in softmax-xent into a scalar cross-entropy
// loss for `label`, computed from the logits via log-sum-exp.
inline float attach_cross_entropy(Tape& tape, std::size_t label) {
  if (!tape.recorded_ || tape.entries_.empty() ||
      !std::holds_alternative<SoftmaxXent>(tape.base_[tape.count_ - 1])) {
    throw UsageError("cross-entropy requires a recorded forward ending in softmax-xent");
  }
  TapeEntry& last = tape.entries_.back();
  const Tensor& z = last.input;
  if (label >= z.size()) {
    throw DataError("label " + std::to_string(label) + " out of range for " +
                    std::to_string(z.size()) + " classes");
  }
  double m = -INFINITY;
  for (float v : z.data()) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  for (float v : z.data()) sum += std::exp(static_cast<double>(v) - m);
  const double loss = m + std::log(sum) - static_cast<double>(z[label]);
  last.target = label;
  tape.loss_ = static_cast<float>(loss);
  return *tape.loss_;
}

// Replays `tape` in reverse with the given seed (the loss gradient; scalar 1
// for an attached cross-entropy, otherwise a tensor shaped like the output).
// Parameter gradients of trainable parameters are accumulated when
// `accumulate_params` is set. Returns the input gradient and consumes the tape.
inline Tensor backward(std::span<Layer> layers, Tape& tape, const Tensor& seed,
                       bool accumulate_params = true) {
  if (!tape.recorded_) throw UsageError("backward called without a recorded tape");
  if (layers.data() != tape.base_ || layers.size() != tape.count_) {
    throw UsageError("backward called with layers other than the recorded ones");
  }
  const Shape expected = tape.loss_ ? Shape{1} : tape.output_shape_;
  if (seed.shape() != expected) {
    throw UsageError("loss gradient shape " + shape_string(seed.shape()) +
                     " does not match " + shape_string(expected));
  }
  Tensor g = seed;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    Layer& layer = layers[it->layer];
    bool acc = accumulate_params;
    if (acc) {
      // Frozen layers still propagate but never collect gradients.
      for_each_parameter(layer, [&](const Parameter& p) { acc = acc && p.trainable; });
    }
    g = std::visit([&](auto& l) { return l.backward(*it, g, acc); }, layer);
  }
  tape.clear();
  return g;
}

inline Tensor backward(std::span<Layer> layers, Tape& tape) {
  return backward(layers, tape, Tensor::scalar(1.0f));
}

inline std::vector<Parameter*> parameters(std::span<Layer> layers) {
  std::vector<Parameter*> out;
  for (Layer& layer : layers) for_each_parameter(layer, [&](Parameter& p) { out.push_back(&p); });
  return out;
}

inline void zero_grads(std::span<Layer> layers) {
  for (Parameter* p : parameters(layers)) p->grad.fill(0.0f);
}

// w <- w - lr * (accumulated grad / batch) for trainable parameters, then
// zeroes every gradient. A zero learning rate leaves weights untouched.
inline void sgd_step(std::span<Parameter* const> params, float learning_rate,
                     std::size_t batch_size) {
  if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be a finite non-negative number");
  }
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const float n = static_cast<float>(batch_size);
  for (Parameter* p : params) {
    if (p->trainable && learning_rate > 0.0f) {
      float* w = p->value.raw();
      const float* g = p->grad.raw();
      for (std::size_t i = 0; i < p->value.size(); ++i) w[i] -= learning_rate * (g[i] / n);
    }
    p->grad.fill(0.0f);
  }
}

inline void sgd_step(std::span<Layer> layers, float learning_rate, std::size_t batch_size) {
  const auto params = parameters(layers);
  sgd_step(params, learning_rate, batch_size);
}

// Glorot-uniform weights in [-sqrt(6/(fan_in+fan_out)), +...], zero biases.
inline void init_glorot(std::span<Layer> layers, Rng& rng) {
  for (Layer& layer : layers) {
    auto fill = [&rng](Parameter& w, Parameter& b, double fan_in, double fan_out) {
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (float& v : w.value.data()) {
        v = static_cast<float>((2.0 * rng.uniform() - 1.0) * limit);
      }
      b.value.fill(0.0f);
    };
    if (auto* d = std::get_if<Dense>(&layer)) {
      fill(d->weight, d->bias, static_cast<double>(d->in_features()),
           static_cast<double>(d->out_features()));
    } else if (auto* c = std::get_if<Conv2D>(&layer)) {
      const double kk = static_cast<double>(c->kernel() * c->kernel());
      fill(c->weight, c->bias, static_cast<double>(c->in_channels()) * kk,
           static_cast<double>(c->out_channels()) * kk);
    }
  }
}

inline void set_trainable(std::span<Layer> layers, bool trainable) {
  for (Parameter* p : parameters(layers)) p->trainable = trainable;
}

inline std::uint64_t weights_fingerprint(std::span<const Layer> layers) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Layer& layer : layers) {
    for_each_parameter(layer, [&](const Parameter& p) { h = fingerprint(p.value, h); });
  }
  return h;
}

// A layer list bound to its input shape.
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<Layer> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    output_shape_ = infer_shape(layers_, input_shape_);
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  const Shape& output_shape() const noexcept { return output_shape_; }
  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }

  std::span<Layer> layers() noexcept { return layers_; }
  std::span<const Layer> layers() const noexcept { return layers_; }

  Tensor forward(const Tensor& x) const { return ad::forward(layers(), x); }
  Tensor forward(const Tensor& x, Tape& tape) const { return ad::forward(layers(), x, tape); }
  Tensor backward(Tape& tape, const Tensor& seed, bool accumulate = true) {
    return ad::backward(layers(), tape, seed, accumulate);
  }

  std::vector<Parameter*> parameters() { return ad::parameters(layers()); }
  void zero_grads() { ad::zero_grads(layers()); }
  void sgd_step(float lr, std::size_t batch) { ad::sgd_step(layers(), lr, batch); }
  void set_trainable(bool t) { ad::set_trainable(layers(), t); }
  std::uint64_t fingerprint() const { return weights_fingerprint(layers()); }

 private:
  Shape input_shape_;
  Shape output_shape_;
  std::vector<Layer> layers_;
};

}  // namespace arden::ad
