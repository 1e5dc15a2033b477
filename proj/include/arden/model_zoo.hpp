#pragma once

// Desk-scale architectures, the local/cloud split, and the weights file.
//
// Weights file layout (all integers little-endian):
//   "ARDN" | version:u8 (=1) | record_count:u32 |
//   record_count * { name_len:u32 | name:utf8 | rank:u32 | dims:u32*rank |
//                    data:f32*prod(dims) }
// Records are named "layer<i>.weight" / "layer<i>.bias" after the index of
// the owning layer.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/dataset.hpp"
#include "arden/error.hpp"
#include "arden/sgd.hpp"
#include "arden/tensor.hpp"

namespace arden::zoo {

enum class LayerKind { kDense, kConv, kRelu, kMaxPool, kSoftmaxXent };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t units = 0;     // dense
  std::size_t channels = 0;  // conv output channels
  std::size_t kernel = 0;    // conv
  ad::Padding padding = ad::Padding::kSame;

  static LayerSpec dense(std::size_t units) { return {LayerKind::kDense, units, 0, 0, {}}; }
  static LayerSpec conv(std::size_t channels, std::size_t kernel,
                        ad::Padding pad = ad::Padding::kSame) {
    return {LayerKind::kConv, 0, channels, kernel, pad};
  }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 0, 0, {}}; }
  static LayerSpec maxpool() { return {LayerKind::kMaxPool, 0, 0, 0, {}}; }
  static LayerSpec softmax_xent() { return {LayerKind::kSoftmaxXent, 0, 0, 0, {}}; }
};

struct Architecture {
  std::string name;
  Shape input_shape;
  std::vector<LayerSpec> layers;
};

inline const std::vector<Architecture>& registry() {
  using L = LayerSpec;
  static const std::vector<Architecture> archs = {
      // Shallow feature extractor deployed on the device. The three layers
      // are conv, ReLU and pooling counted separately.
      {"local-3", {1, 28, 28}, {L::conv(16, 3), L::relu(), L::maxpool()}},
      {"cloud-mid",
       {16, 14, 14},
       {L::conv(32, 3), L::relu(), L::maxpool(), L::dense(128), L::relu(), L::dense(10),
        L::softmax_xent()}},
      // Same classifier fed with raw images (no local transformation).
      {"base-mid",
       {1, 28, 28},
       {L::conv(32, 3), L::relu(), L::maxpool(), L::dense(128), L::relu(), L::dense(10),
        L::softmax_xent()}},
      {"cloud-small", {16, 14, 14}, {L::dense(64), L::relu(), L::dense(10), L::softmax_xent()}},
  };
  return archs;
}

inline std::vector<std::string> registry_names() {
  std::vector<std::string> out;
  for (const auto& a : registry()) out.push_back(a.name);
  return out;
}

inline Architecture build_architecture(std::string_view name) {
  for (const auto& a : registry()) {
    if (a.name == name) return a;
  }
  std::string known;
  for (const auto& n : registry_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown architecture '" + std::string(name) + "' (known: " + known + ")");
}

// Materializes an architecture with Glorot-initialized weights.
inline ad::Network instantiate(const Architecture& arch, std::uint64_t seed) {
  std::vector<ad::Layer> layers;
  Shape shape = arch.input_shape;
  for (const LayerSpec& s : arch.layers) {
    switch (s.kind) {
      case LayerKind::kDense:
        if (s.units == 0) throw ConfigError("dense layer needs positive units");
        layers.emplace_back(ad::Dense(shape_size(shape), s.units));
        break;
      case LayerKind::kConv:
        if (s.channels == 0 || s.kernel == 0 || shape.size() != 3) {
          throw ConfigError("conv layer needs positive channels/kernel and a CxHxW input");
        }
        layers.emplace_back(ad::Conv2D(shape[0], s.channels, s.kernel, s.padding));
        break;
      case LayerKind::kRelu: layers.emplace_back(ad::Relu{}); break;
      case LayerKind::kMaxPool: layers.emplace_back(ad::MaxPool2{}); break;
      case LayerKind::kSoftmaxXent: layers.emplace_back(ad::SoftmaxXent{}); break;
    }
    shape = ad::infer_shape(std::span<const ad::Layer>(&layers.back(), 1), shape);
  }
  ad::Network net(arch.input_shape, std::move(layers));
  Rng rng(seed);
  ad::init_glorot(net.layers(), rng);
  return net;
}

// Local network M = tail(head(.)), split at the injection layer; the cloud
// network C consumes the local output.
class SplitModel {
 public:
  SplitModel(ad::Network local, ad::Network cloud, std::size_t injection)
      : local_(std::move(local)), cloud_(std::move(cloud)) {
    if (local_.output_shape() != cloud_.input_shape()) {
      throw ConfigError("local output " + shape_string(local_.output_shape()) +
                        " does not match cloud input " + shape_string(cloud_.input_shape()));
    }
    local_.set_trainable(false);
    set_injection(injection);
  }

  // 0 injects at the (nullified) input; local().size() at the local output.
  void set_injection(std::size_t l) {
    if (l > local_.size()) {
      throw ConfigError("injection layer " + std::to_string(l) + " outside local network of " +
                        std::to_string(local_.size()) + " layers");
    }
    injection_ = l;
  }
  std::size_t injection() const noexcept { return injection_; }
  bool injects_at_last_layer() const noexcept { return injection_ == local_.size(); }

  const ad::Network& local() const noexcept { return local_; }
  const ad::Network& cloud() const noexcept { return cloud_; }
  ad::Network& cloud() noexcept { return cloud_; }

  std::span<const ad::Layer> head() const { return local_.layers().first(injection_); }
  std::span<const ad::Layer> tail() const { return local_.layers().subspan(injection_); }
  Shape injection_shape() const { return ad::infer_shape(head(), local_.input_shape()); }

 private:
  ad::Network local_;
  ad::Network cloud_;
  std::size_t injection_ = 0;
};

// --- weights file -----------------------------------------------------------

inline constexpr char kWeightsMagic[4] = {'A', 'R', 'D', 'N'};
inline constexpr std::uint8_t kWeightsVersion = 1;

enum class LoadErrorKind { kIo, kBadMagic, kVersionMismatch, kTruncated, kMalformed, kShapeMismatch };
using LoadError = KindedError<LoadErrorKind>;

struct WeightRecord {
  std::string name;
  Tensor value;
};

struct WeightsFile {
  std::vector<WeightRecord> records;
};

inline WeightsFile extract_weights(const ad::Network& net) {
  WeightsFile f;
  const auto layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    int slot = 0;
    ad::for_each_parameter(layers[i], [&](const ad::Parameter& p) {
      f.records.push_back({"layer" + std::to_string(i) + (slot++ == 0 ? ".weight" : ".bias"), p.value});
    });
  }
  return f;
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LoadError(LoadErrorKind::kTruncated, "weights file truncated");
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const WeightsFile& f) {
  std::vector<std::uint8_t> out(std::begin(kWeightsMagic), std::end(kWeightsMagic));
  out.push_back(kWeightsVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(f.records.size()));
  for (const auto& r : f.records) {
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(r.value.rank()));
    for (std::size_t d : r.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : r.value.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline WeightsFile decode_weights(std::span<const std::uint8_t> bytes) {
  detail::Reader in(bytes);
  if (bytes.size() < 4) throw LoadError(LoadErrorKind::kTruncated, "weights file truncated");
  if (std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) {
    throw LoadError(LoadErrorKind::kBadMagic, "bad magic: not an ARDN weights file");
  }
  in.take(4);
  const std::uint8_t version = in.u8();
  if (version != kWeightsVersion) {
    throw LoadError(LoadErrorKind::kVersionMismatch,
                    "weights version " + std::to_string(version) + " unsupported");
  }
  const std::uint32_t count = in.u32();
  WeightsFile f;
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::uint32_t name_len = in.u32();
    auto name = in.take(name_len);
    const std::uint32_t rank = in.u32();
    if (rank == 0) throw LoadError(LoadErrorKind::kMalformed, "record with rank 0");
    in.need(std::size_t{4} * rank);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(in.u32());
      if (shape.back() == 0) throw LoadError(LoadErrorKind::kMalformed, "record with zero dimension");
      n *= shape.back();
      if (n > bytes.size()) throw LoadError(LoadErrorKind::kTruncated, "weights file truncated");
    }
    auto raw = in.take(4 * n);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= std::uint32_t{raw[4 * i + b]} << (8 * b);
      data[i] = std::bit_cast<float>(u);
    }
    f.records.push_back({std::string(name.begin(), name.end()), Tensor(shape, std::move(data))});
  }
  if (!in.done()) throw LoadError(LoadErrorKind::kMalformed, "trailing bytes after last record");
  return f;
}

inline void save_weights(const ad::Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_weights(extract_weights(net));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError(LoadErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError(LoadErrorKind::kIo, "write failed for " + path.string());
}

inline WeightsFile load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(LoadErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_weights(bytes);
}

// Copies records into `net`, which must have exactly matching names/shapes.
inline void apply_weights(ad::Network& net, const WeightsFile& f) {
  const WeightsFile expected = extract_weights(net);
  if (expected.records.size() != f.records.size()) {
    throw LoadError(LoadErrorKind::kShapeMismatch,
                    "shape mismatch: file has " + std::to_string(f.records.size()) +
                        " records, architecture expects " + std::to_string(expected.records.size()));
  }
  for (std::size_t i = 0; i < f.records.size(); ++i) {
    const auto& want = expected.records[i];
    const auto& got = f.records[i];
    if (want.name != got.name || want.value.shape() != got.value.shape()) {
      throw LoadError(LoadErrorKind::kShapeMismatch,
                      "shape mismatch at record " + std::to_string(i) + ": file has " + got.name +
                          shape_string(got.value.shape()) + ", architecture expects " + want.name +
                          shape_string(want.value.shape()));
    }
  }
  std::size_t i = 0;
  for (ad::Parameter* p : net.parameters()) p->value = f.records[i++].value;
}

inline ad::Network load_model(const Architecture& arch, const std::filesystem::path& path) {
  ad::Network net = instantiate(arch, 0);
  apply_weights(net, load_weights(path));
  return net;
}

// --- transfer learning ------------------------------------------------------

struct PretrainConfig {
  std::string local_arch = "local-3";
  std::string head_arch = "cloud-mid";
  train::SgdConfig sgd{0.01f, 32, 2, 0};
};

// Trains local+head on the source dataset and returns the local layers,
// frozen. With zero epochs the initialization weights are returned.
inline ad::Network pretrain_local(const data::Dataset& source, const PretrainConfig& config) {
  if (source.empty()) throw DataError("pretraining source dataset is empty");
  const Architecture local_arch = build_architecture(config.local_arch);
  Architecture full = build_architecture(config.head_arch);
  const std::size_t local_count = local_arch.layers.size();
  full.name = local_arch.name + "+" + full.name;
  full.input_shape = local_arch.input_shape;
  full.layers.insert(full.layers.begin(), local_arch.layers.begin(), local_arch.layers.end());
  ad::Network net = instantiate(full, config.sgd.seed);
  if (config.sgd.epochs > 0) train::train_clean(net, source.images, source.labels, config.sgd);
  std::vector<ad::Layer> local(net.layers().begin(),
                               net.layers().begin() + static_cast<std::ptrdiff_t>(local_count));
  ad::Network out(local_arch.input_shape, std::move(local));
  out.zero_grads();
  out.set_trainable(false);
  return out;
}

}  // namespace arden::zoo
