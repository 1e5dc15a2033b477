#pragma once

// Split inference over TCP. The device runs the local transform and sends
// only the perturbed representation; the server owns the cloud models and
// answers each representation frame with class probabilities.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "arden/autodiff.hpp"
#include "arden/dp_transform.hpp"
#include "arden/error.hpp"
#include "arden/model_zoo.hpp"
#include "arden/protocol.hpp"
#include "arden/rng.hpp"

namespace arden::net {

class TransportError : public Error {
 public:
  using Error::Error;
};

// The server answered with an error frame; what() is the server's message.
class ServerError : public Error {
 public:
  using Error::Error;
};

class StartupError : public Error {
 public:
  using Error::Error;
};

inline constexpr const char* kDefaultBind = "127.0.0.1:7878";
inline constexpr std::chrono::milliseconds kDefaultTimeout{10000};

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const { return host + ":" + std::to_string(port); }
};

inline Endpoint parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw ConfigError("endpoint '" + s + "' is not host:port");
  }
  const std::string port = s.substr(colon + 1);
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (*end != '\0' || p < 0 || p > 65535) throw ConfigError("bad port in endpoint '" + s + "'");
  return {s.substr(0, colon), static_cast<std::uint16_t>(p)};
}

// Flag value if given, else the environment variable, else the fallback.
inline std::string resolve_address(const std::string& flag, const char* env_var, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* v = std::getenv(env_var); v && *v) return v;
  return fallback;
}

inline std::string bind_address(const std::string& flag = {}) {
  return resolve_address(flag, "ARDEN_BIND", kDefaultBind);
}
inline std::string client_endpoint(const std::string& flag = {}) {
  return resolve_address(flag, "ARDEN_ENDPOINT", kDefaultBind);
}

namespace detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline std::string errno_text() { return std::strerror(errno); }

inline sockaddr_in resolve(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || !res) throw TransportError("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof(addr));
  ::freeaddrinfo(res);
  addr.sin_port = htons(ep.port);
  return addr;
}

// false on orderly EOF before the first byte; throws on partial reads.
inline bool read_exact(int fd, std::uint8_t* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw TransportError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) throw TransportError("receive timed out");
      throw TransportError("recv: " + errno_text());
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

inline void write_all(int fd, std::span<const std::uint8_t> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t r = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) throw TransportError("send timed out");
      throw TransportError("send: " + errno_text());
    }
    sent += static_cast<std::size_t>(r);
  }
}

// Drops whatever the peer has already sent; used to resynchronise after a
// header that cannot be framed.
inline void drain_pending(int fd) {
  std::uint8_t sink[4096];
  while (::recv(fd, sink, sizeof sink, MSG_DONTWAIT) > 0) {
  }
}

inline void set_timeouts(int fd, std::chrono::milliseconds t) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(t.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((t.count() % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

}  // namespace detail

// Served cloud models by id. Readers take a snapshot; replacing an id swaps
// the pointer, so a request that already holds the old model finishes on it.
class ModelRegistry {
 public:
  using ModelPtr = std::shared_ptr<const ad::Network>;

  void put(const std::string& id, ad::Network model) {
    auto p = std::make_shared<const ad::Network>(std::move(model));
    std::lock_guard lock(mu_);
    models_[id] = std::move(p);
  }
  ModelPtr get(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = models_.find(id);
    return it == models_.end() ? nullptr : it->second;
  }
  bool erase(const std::string& id) {
    std::lock_guard lock(mu_);
    return models_.erase(id) > 0;
  }
  std::vector<std::string> ids() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [k, v] : models_) out.push_back(k);
    return out;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, ModelPtr> models_;
};

// Turns one decoded request into the reply message.
inline wire::Message handle_request(const ModelRegistry& registry, const wire::Message& request) {
  const auto* rep = std::get_if<wire::RepresentationMessage>(&request);
  if (!rep) return wire::ErrorMessage{"unexpected message type: expected a representation"};
  const auto model = registry.get(rep->model_id);
  if (!model) return wire::ErrorMessage{"unknown model '" + rep->model_id + "'"};
  const Tensor& x = rep->representation.tensor();
  if (x.shape() != model->input_shape()) {
    return wire::ErrorMessage{"shape mismatch: representation " + shape_string(x.shape()) +
                              " vs model input " + shape_string(model->input_shape())};
  }
  try {
    const Tensor y = model->forward(x);
    return wire::InferenceResponse{std::vector<float>(y.data().begin(), y.data().end())};
  } catch (const std::exception& e) {
    return wire::ErrorMessage{std::string("inference failed: ") + e.what()};
  }
}

class Server {
 public:
  explicit Server(std::shared_ptr<ModelRegistry> registry) : registry_(std::move(registry)) {
    if (!registry_) throw UsageError("server needs a model registry");
  }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;
  ~Server() { stop(); }

  // Binds and starts accepting; port 0 picks a free port.
  void start(const std::string& bind = kDefaultBind) {
    if (running_) throw UsageError("server already running");
    const Endpoint ep = parse_endpoint(bind);
    sockaddr_in addr{};
    try {
      addr = detail::resolve(ep);
    } catch (const TransportError& e) {
      throw StartupError(e.what());
    }
    detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd) throw StartupError("socket: " + detail::errno_text());
    const int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw StartupError("cannot bind " + bind + ": " + detail::errno_text());
    }
    if (::listen(fd.get(), 64) != 0) throw StartupError("listen: " + detail::errno_text());
    socklen_t len = sizeof addr;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    host_ = ep.host;
    listener_ = std::move(fd);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listener_.get(), SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    listener_.reset();
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(conn_mu_);
      for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
      workers = std::move(workers_);
    }
    for (auto& t : workers) t.join();
  }

  bool running() const { return running_; }
  std::uint16_t port() const { return port_; }
  Endpoint endpoint() const { return {host_, port_}; }
  ModelRegistry& registry() { return *registry_; }
  std::uint64_t requests_served() const { return served_; }

 private:
  void accept_loop() {
    while (running_) {
      const int c = ::accept(listener_.get(), nullptr, nullptr);
      if (c < 0) {
        if (errno == EINTR || errno == ECONNABORTED) continue;
        break;
      }
      const int one = 1;
      ::setsockopt(c, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(conn_mu_);
      if (!running_) {
        ::close(c);
        break;
      }
      open_fds_.push_back(c);
      workers_.emplace_back([this, c] { serve_connection(c); });
    }
  }

  void serve_connection(int fd) {
    try {
      std::vector<std::uint8_t> header(wire::kHeaderSize), payload;
      while (running_) {
        if (!detail::read_exact(fd, header.data(), header.size())) break;
        wire::FrameHeader h{};
        try {
          h = wire::decode_header(header);
        } catch (const wire::DecodeError& e) {
          detail::drain_pending(fd);
          detail::write_all(fd, wire::encode_frame(wire::ErrorMessage{e.what()}));
          continue;
        }
        payload.resize(h.payload_len);
        if (h.payload_len && !detail::read_exact(fd, payload.data(), payload.size())) break;
        wire::Message reply = wire::ErrorMessage{};
        try {
          reply = handle_request(*registry_, wire::decode_payload(h.type, payload));
        } catch (const wire::DecodeError& e) {
          reply = wire::ErrorMessage{e.what()};
        }
        ++served_;
        detail::write_all(fd, wire::encode_frame(reply));
      }
    } catch (const std::exception&) {
      // Peer went away or timed out; just drop the connection.
    }
    std::lock_guard lock(conn_mu_);
    std::erase(open_fds_, fd);
    ::close(fd);
  }

  std::shared_ptr<ModelRegistry> registry_;
  detail::Fd listener_;
  std::atomic<bool> running_{false};
  std::atomic<std::uint64_t> served_{0};
  std::uint16_t port_ = 0;
  std::string host_;
  std::thread acceptor_;
  std::mutex conn_mu_;
  std::vector<int> open_fds_;
  std::vector<std::thread> workers_;
};

// One synchronous connection. Use one Client per thread.
class Client {
 public:
  explicit Client(const std::string& endpoint, std::chrono::milliseconds timeout = kDefaultTimeout)
      : endpoint_(parse_endpoint(endpoint)), timeout_(timeout) {}

  void connect() {
    if (fd_) return;
    const sockaddr_in addr = detail::resolve(endpoint_);
    detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd) throw TransportError("socket: " + detail::errno_text());
    const int flags = ::fcntl(fd.get(), F_GETFL, 0);
    ::fcntl(fd.get(), F_SETFL, flags | O_NONBLOCK);
    if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      if (errno != EINPROGRESS) {
        throw TransportError("connect to " + endpoint_.to_string() + ": " + detail::errno_text());
      }
      pollfd p{fd.get(), POLLOUT, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(timeout_.count()));
      if (rc == 0) throw TransportError("connect to " + endpoint_.to_string() + " timed out");
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (rc < 0 || err != 0) {
        throw TransportError("connect to " + endpoint_.to_string() + ": " + std::strerror(err ? err : errno));
      }
    }
    ::fcntl(fd.get(), F_SETFL, flags);
    detail::set_timeouts(fd.get(), timeout_);
    const int one = 1;
    ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    fd_ = std::move(fd);
  }

  void close() { fd_.reset(); }

  // Sends one frame and waits for the reply frame.
  wire::Message exchange_raw(std::span<const std::uint8_t> frame) {
    connect();
    try {
      detail::write_all(fd_.get(), frame);
      std::vector<std::uint8_t> buf(wire::kHeaderSize);
      if (!detail::read_exact(fd_.get(), buf.data(), buf.size())) {
        throw TransportError("server closed the connection");
      }
      const wire::FrameHeader h = wire::decode_header(buf);
      buf.resize(wire::kHeaderSize + h.payload_len);
      if (h.payload_len && !detail::read_exact(fd_.get(), buf.data() + wire::kHeaderSize, h.payload_len)) {
        throw TransportError("server closed the connection");
      }
      return wire::decode_frame(buf);
    } catch (const wire::DecodeError& e) {
      close();
      throw TransportError(std::string("bad reply: ") + e.what());
    } catch (const TransportError&) {
      close();
      throw;
    }
  }

  // The only way to put a tensor on the wire is as a post-transform value.
  std::vector<float> infer(const std::string& model_id, const dp::PerturbedRepresentation& rep) {
    const auto frame = wire::encode_frame(wire::RepresentationMessage{model_id, rep});
    wire::Message reply = exchange_raw(frame);
    if (auto* e = std::get_if<wire::ErrorMessage>(&reply)) throw ServerError(e->message);
    if (auto* r = std::get_if<wire::InferenceResponse>(&reply)) return std::move(r->probabilities);
    throw TransportError("server replied with a representation frame");
  }

 private:
  Endpoint endpoint_;
  std::chrono::milliseconds timeout_;
  detail::Fd fd_;
};

struct InferenceResult {
  dp::PerturbedRepresentation representation;
  std::vector<float> probabilities;
};

// Transforms x_s on the device and asks the server to classify the result.
inline InferenceResult client_infer(const Tensor& x_s, const zoo::SplitModel& model,
                                    const dp::PerturbationConfig& config, const std::string& model_id,
                                    Client& client, Rng& rng) {
  dp::PerturbedRepresentation rep = dp::transform(x_s, model, config, rng);
  std::vector<float> p = client.infer(model_id, rep);
  return {std::move(rep), std::move(p)};
}

inline InferenceResult client_infer(const Tensor& x_s, const zoo::SplitModel& model,
                                    const dp::PerturbationConfig& config, const std::string& model_id,
                                    const std::string& endpoint,
                                    std::chrono::milliseconds timeout = kDefaultTimeout) {
  Client client(endpoint, timeout);
  Rng rng(config.seed);
  return client_infer(x_s, model, config, model_id, client, rng);
}

}  // namespace arden::net
