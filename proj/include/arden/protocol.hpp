#pragma once

// Wire format, all integers and floats little-endian:
//
//   frame          "ARDN" | version u8 (=1) | type u8 | payload_len u32 | payload
//   representation model_id_len u32 | model_id (UTF-8) | rank u8 | dims u32 x rank | f32 data
//   response       class_count u32 | f32 x class_count
//   error          UTF-8 message (the whole payload)
//
// Decoding is strict: anything accepted re-encodes to the same bytes.

#include <array>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "arden/dp_transform.hpp"
#include "arden/error.hpp"
#include "arden/tensor.hpp"

namespace arden::wire {

inline constexpr std::array<std::uint8_t, 4> kMagic{'A', 'R', 'D', 'N'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 10;
inline constexpr std::uint32_t kMaxPayload = 64u << 20;

enum class MessageType : std::uint8_t { kRepresentation = 1, kResponse = 2, kError = 3 };

enum class DecodeErrorKind {
  kBadMagic,
  kUnsupportedVersion,
  kUnknownType,
  kTruncated,
  kOversize,
  kDimsMismatch,
  kMalformed,
};

inline const char* to_string(DecodeErrorKind k) {
  switch (k) {
    case DecodeErrorKind::kBadMagic: return "bad magic";
    case DecodeErrorKind::kUnsupportedVersion: return "unsupported version";
    case DecodeErrorKind::kUnknownType: return "unknown message type";
    case DecodeErrorKind::kTruncated: return "truncated";
    case DecodeErrorKind::kOversize: return "oversize payload";
    case DecodeErrorKind::kDimsMismatch: return "dims/data mismatch";
    case DecodeErrorKind::kMalformed: return "malformed";
  }
  return "?";
}

class DecodeError : public KindedError<DecodeErrorKind, DataError> {
 public:
  DecodeError(DecodeErrorKind kind, const std::string& detail)
      : KindedError(kind, std::string(to_string(kind)) + ": " + detail) {}
};

struct RepresentationMessage {
  std::string model_id;
  dp::PerturbedRepresentation representation;
};

struct InferenceResponse {
  std::vector<float> probabilities;
};

struct ErrorMessage {
  std::string message;
};

using Message = std::variant<RepresentationMessage, InferenceResponse, ErrorMessage>;

inline MessageType type_of(const Message& m) {
  return static_cast<MessageType>(m.index() + 1);
}

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::size_t remaining() const { return in_.size() - pos_; }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw DecodeError(DecodeErrorKind::kMalformed, "payload ends inside a field");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t n;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      n = 1, cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      n = 2, cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      n = 3, cp = c & 0x07;
    } else {
      return false;
    }
    if (i + n >= s.size()) return false;
    for (std::size_t k = 1; k <= n; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = cp << 6 | (cc & 0x3F);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((n == 1 && cp < 0x80) || (n == 2 && cp < 0x800) || (n == 3 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += n + 1;
  }
  return true;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_payload(const Message& m) {
  detail::Writer w;
  if (const auto* r = std::get_if<RepresentationMessage>(&m)) {
    const Tensor& t = r->representation.tensor();
    if (t.rank() > 255) throw UsageError("representation rank exceeds 255");
    w.u32(static_cast<std::uint32_t>(r->model_id.size()));
    w.bytes(r->model_id);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  } else if (const auto* p = std::get_if<InferenceResponse>(&m)) {
    w.u32(static_cast<std::uint32_t>(p->probabilities.size()));
    for (float v : p->probabilities) w.f32(v);
  } else {
    w.bytes(std::get<ErrorMessage>(m).message);
  }
  return std::move(w.buffer());
}

inline std::vector<std::uint8_t> encode_frame(const Message& m) {
  const std::vector<std::uint8_t> payload = encode_payload(m);
  if (payload.size() > kMaxPayload) throw UsageError("message exceeds the 64 MiB payload limit");
  detail::Writer w;
  w.bytes(std::string_view(reinterpret_cast<const char*>(kMagic.data()), kMagic.size()));
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(type_of(m)));
  w.u32(static_cast<std::uint32_t>(payload.size()));
  auto& out = w.buffer();
  out.insert(out.end(), payload.begin(), payload.end());
  return std::move(out);
}

struct FrameHeader {
  MessageType type;
  std::uint32_t payload_len;
};

inline FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    throw DecodeError(DecodeErrorKind::kTruncated, "frame shorter than its 10-byte header");
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw DecodeError(DecodeErrorKind::kBadMagic, "expected \"ARDN\"");
  }
  if (bytes[4] != kVersion) {
    throw DecodeError(DecodeErrorKind::kUnsupportedVersion, "version " + std::to_string(bytes[4]));
  }
  const std::uint8_t type = bytes[5];
  if (type < 1 || type > 3) {
    throw DecodeError(DecodeErrorKind::kUnknownType, "msg_type " + std::to_string(type));
  }
  detail::Reader r(bytes.subspan(6, 4));
  const std::uint32_t len = r.u32();
  if (len > kMaxPayload) {
    throw DecodeError(DecodeErrorKind::kOversize, std::to_string(len) + " bytes");
  }
  return {static_cast<MessageType>(type), len};
}

inline Message decode_payload(MessageType type, std::span<const std::uint8_t> payload) {
  detail::Reader r(payload);
  switch (type) {
    case MessageType::kRepresentation: {
      const std::uint32_t id_len = r.u32();
      if (id_len > r.remaining()) throw DecodeError(DecodeErrorKind::kMalformed, "model_id overruns payload");
      std::string id = r.bytes(id_len);
      if (!detail::valid_utf8(id)) throw DecodeError(DecodeErrorKind::kMalformed, "model_id is not UTF-8");
      const std::uint8_t rank = r.u8();
      if (rank == 0) throw DecodeError(DecodeErrorKind::kMalformed, "tensor rank 0");
      Shape shape(rank);
      std::uint64_t count = 1;
      for (auto& d : shape) {
        d = r.u32();
        if (d == 0) throw DecodeError(DecodeErrorKind::kMalformed, "zero tensor dimension");
        count *= d;
        if (count > kMaxPayload) throw DecodeError(DecodeErrorKind::kDimsMismatch, "dims exceed payload");
      }
      if (r.remaining() != count * 4) {
        throw DecodeError(DecodeErrorKind::kDimsMismatch, shape_string(shape) + " needs " +
                                                              std::to_string(count * 4) + " data bytes, got " +
                                                              std::to_string(r.remaining()));
      }
      std::vector<float> data(count);
      for (auto& v : data) v = r.f32();
      return RepresentationMessage{std::move(id),
                                   dp::RepresentationAccess::from_wire(Tensor(std::move(shape), std::move(data)))};
    }
    case MessageType::kResponse: {
      const std::uint32_t n = r.u32();
      if (r.remaining() != std::uint64_t{n} * 4) {
        throw DecodeError(DecodeErrorKind::kDimsMismatch, "class_count " + std::to_string(n) + " vs " +
                                                              std::to_string(r.remaining()) + " data bytes");
      }
      std::vector<float> p(n);
      for (auto& v : p) v = r.f32();
      return InferenceResponse{std::move(p)};
    }
    case MessageType::kError: {
      std::string s = r.bytes(payload.size());
      if (!detail::valid_utf8(s)) throw DecodeError(DecodeErrorKind::kMalformed, "error message is not UTF-8");
      return ErrorMessage{std::move(s)};
    }
  }
  throw DecodeError(DecodeErrorKind::kUnknownType, "msg_type");
}

// Decodes exactly one frame; trailing bytes are rejected.
inline Message decode_frame(std::span<const std::uint8_t> bytes) {
  const FrameHeader h = decode_header(bytes);
  const std::size_t rest = bytes.size() - kHeaderSize;
  if (rest < h.payload_len) {
    throw DecodeError(DecodeErrorKind::kTruncated, "payload_len " + std::to_string(h.payload_len) + " but " +
                                                       std::to_string(rest) + " bytes follow");
  }
  if (rest > h.payload_len) throw DecodeError(DecodeErrorKind::kMalformed, "trailing bytes after payload");
  return decode_payload(h.type, bytes.subspan(kHeaderSize, h.payload_len));
}

// Probabilities sum to 1 within 1e-4 and are non-negative.
inline bool is_distribution(std::span<const float> p, double tol = 1e-4) {
  double s = 0.0;
  for (float v : p) {
    if (!(v >= 0.0f)) return false;
    s += v;
  }
  return !p.empty() && std::abs(s - 1.0) <= tol;
}

}  // namespace arden::wire
