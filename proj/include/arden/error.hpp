#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace arden {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters, unknown registry names, inconsistent layer shapes.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or degenerate input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// API misuse: calling operations out of order or with mismatched arguments.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Error carrying a machine-checkable reason code in addition to the message.
template <typename Kind, typename Base = Error>
class KindedError : public Base {
 public:
  KindedError(Kind kind, const std::string& what) : Base(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace arden
