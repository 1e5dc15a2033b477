#pragma once

// Flat key=value configuration files. '#' starts a comment, blank lines are
// ignored, keys may not repeat.

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "arden/error.hpp"

namespace arden::config {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& origin = "config") {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto nl = text.find('\n', pos);
      std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(line_no);
      if (eq == std::string_view::npos) throw ConfigError(where + ": expected key=value");
      const std::string key(detail::trim(line.substr(0, eq)));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (kv.values_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      kv.values_[key] = std::string(detail::trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::optional<std::string> string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<double> number(const std::string& key) const {
    const auto s = string(key);
    if (!s) return std::nullopt;
    return parse_double(key, *s);
  }

  std::optional<std::uint64_t> integer(const std::string& key) const {
    const auto s = string(key);
    if (!s) return std::nullopt;
    return parse_uint(key, *s);
  }

  // Comma-separated list of numbers.
  std::optional<std::vector<double>> numbers(const std::string& key) const {
    const auto s = string(key);
    if (!s) return std::nullopt;
    std::vector<double> out;
    std::stringstream ss(*s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, std::string(detail::trim(item))));
    if (out.empty()) throw ConfigError("'" + key + "' is an empty list");
    return out;
  }

  std::optional<bool> boolean(const std::string& key) const {
    const auto s = string(key);
    if (!s) return std::nullopt;
    if (*s == "true" || *s == "1" || *s == "yes") return true;
    if (*s == "false" || *s == "0" || *s == "no") return false;
    throw ConfigError("'" + key + "' must be true or false, got '" + *s + "'");
  }

  // Rejects keys outside `known`, so typos fail loudly.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
  }

  static double parse_double(const std::string& key, const std::string& s) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0' || errno == ERANGE) {
      throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
    }
    return v;
  }

  static std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError("'" + key + "' expects a non-negative integer, got '" + s + "'");
    }
    return v;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace arden::config
