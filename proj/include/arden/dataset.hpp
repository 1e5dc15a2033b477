#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "arden/error.hpp"
#include "arden/rng.hpp"
#include "arden/tensor.hpp"

namespace arden::data {

// Images normalized to [0,1], shape (1,H,W); one label per image.
struct Dataset {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 10;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }

  // First `n` samples (or all, if fewer).
  Dataset head(std::size_t n) const {
    Dataset out;
    out.num_classes = num_classes;
    n = std::min(n, size());
    out.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }
};

enum class IdxErrorKind { kIo, kBadMagic, kBadHeader, kTruncated, kCountMismatch, kBadLabel };
using IdxError = KindedError<IdxErrorKind, DataError>;

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void check_size(const std::vector<unsigned char>& bytes, std::size_t expected,
                       const std::filesystem::path& path) {
  if (bytes.size() < expected) {
    throw IdxError(IdxErrorKind::kTruncated,
                   path.string() + ": truncated, expected " + std::to_string(expected) +
                       " bytes, found " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw IdxError(IdxErrorKind::kCountMismatch,
                   path.string() + ": " + std::to_string(bytes.size() - expected) +
                       " bytes beyond the declared item count");
  }
}

}  // namespace detail

// Reads an IDX image/label file pair (big-endian headers).
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 4 || lab.size() < 4) {
    throw IdxError(IdxErrorKind::kTruncated, "IDX file shorter than its magic number");
  }
  if (detail::read_be32(img, 0) != kIdxImagesMagic) {
    throw IdxError(IdxErrorKind::kBadMagic, images_path.string() + ": not an IDX image file");
  }
  if (detail::read_be32(lab, 0) != kIdxLabelsMagic) {
    throw IdxError(IdxErrorKind::kBadMagic, labels_path.string() + ": not an IDX label file");
  }
  if (img.size() < 16 || lab.size() < 8) {
    throw IdxError(IdxErrorKind::kTruncated, "IDX header truncated");
  }
  const std::size_t n = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t nl = detail::read_be32(lab, 4);
  if (rows == 0 || cols == 0) {
    throw IdxError(IdxErrorKind::kBadHeader, images_path.string() + ": zero image dimension");
  }
  detail::check_size(img, 16 + n * rows * cols, images_path);
  detail::check_size(lab, 8 + nl, labels_path);
  if (n != nl) {
    throw IdxError(IdxErrorKind::kCountMismatch,
                   std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  Dataset ds;
  ds.images.reserve(n);
  ds.labels.reserve(n);
  const std::size_t px = rows * cols;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(px);
    for (std::size_t j = 0; j < px; ++j) v[j] = static_cast<float>(img[16 + i * px + j]) / 255.0f;
    ds.images.emplace_back(Shape{1, rows, cols}, std::move(v));
    const std::size_t label = lab[8 + i];
    if (label >= ds.num_classes) {
      throw IdxError(IdxErrorKind::kBadLabel, "label " + std::to_string(label) + " out of range");
    }
    ds.labels.push_back(label);
  }
  return ds;
}

// `<dir>/<prefix>-images-idx3-ubyte` and `<dir>/<prefix>-labels-idx1-ubyte`,
// prefix "train" or "t10k".
inline Dataset load_idx_dir(const std::filesystem::path& dir, std::string_view prefix) {
  const std::string p(prefix);
  return load_idx(dir / (p + "-images-idx3-ubyte"), dir / (p + "-labels-idx1-ubyte"));
}

// Procedural 28x28 shapes and textures, ten classes:
// disc, ring, filled square, square outline, triangle, horizontal stripes,
// vertical stripes, diagonal stripes, plus, cross. Labels are stratified so
// every class appears floor(size/10) or ceil(size/10) times.
inline Dataset synth_dataset(std::string_view kind, std::size_t size, std::uint64_t seed) {
  if (kind != "shapes") throw ConfigError("unknown synthetic dataset kind '" + std::string(kind) + "'");
  if (size == 0) throw ConfigError("synthetic dataset size must be at least 1");
  constexpr std::size_t kSide = 28;
  constexpr std::size_t kClasses = 10;
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = kClasses;
  ds.labels.resize(size);
  for (std::size_t i = 0; i < size; ++i) ds.labels[i] = i % kClasses;
  rng.shuffle(ds.labels);
  ds.images.reserve(size);

  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t label = ds.labels[i];
    const double cx = 9.0 + 10.0 * rng.uniform();
    const double cy = 9.0 + 10.0 * rng.uniform();
    const double radius = 5.0 + 4.0 * rng.uniform();
    const double intensity = 0.6 + 0.4 * rng.uniform();
    const double period = 3.0 + 4.0 * rng.uniform();
    const double phase = period * rng.uniform();
    const double width = 1.2 + 1.3 * rng.uniform();
    Tensor img({1, kSide, kSide});
    for (std::size_t y = 0; y < kSide; ++y) {
      for (std::size_t x = 0; x < kSide; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double r = std::hypot(dx, dy);
        const double ax = std::fabs(dx), ay = std::fabs(dy);
        // Stripe textures live inside a square window around the centre.
        const bool window = ax <= radius + 2 && ay <= radius + 2;
        auto stripe = [&](double t) {
          return std::fmod(t + phase + 100.0 * period, period) < period / 2;
        };
        bool on = false;
        switch (label) {
          case 0: on = r <= radius; break;
          case 1: on = std::fabs(r - radius) <= width; break;
          case 2: on = ax <= radius && ay <= radius; break;
          case 3: on = std::max(ax, ay) <= radius && std::max(ax, ay) >= radius - width; break;
          case 4: on = dy <= radius && dy >= -radius && ax <= (dy + radius) / 2; break;
          case 5: on = window && stripe(static_cast<double>(y)); break;
          case 6: on = window && stripe(static_cast<double>(x)); break;
          case 7: on = window && stripe(static_cast<double>(x + y) / std::numbers::sqrt2); break;
          case 8: on = (ax <= width && ay <= radius) || (ay <= width && ax <= radius); break;
          default: on = (std::fabs(dx - dy) <= width * std::numbers::sqrt2 ||
                         std::fabs(dx + dy) <= width * std::numbers::sqrt2) &&
                        ax <= radius && ay <= radius;
        }
        const double noise = 0.15 * rng.uniform();
        img[y * kSide + x] = static_cast<float>(std::min(1.0, (on ? intensity : 0.0) + noise));
      }
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

}  // namespace arden::data
