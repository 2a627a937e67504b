#pragma once

// Plain-text key=value configuration.
//
// One `key = value` per line, `#` starts a comment, keys are unique.
// Readers consume keys as they parse them and finish() rejects anything
// left over, so a file cannot carry a key that silently does nothing.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rrn {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& msg)
      : std::invalid_argument("config key '" + key + "': " + msg), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}
}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(t, "line " + std::to_string(line_no) + " is not of the form key=value");
      auto key = detail::trim(std::string_view(t).substr(0, eq));
      auto value = detail::trim(std::string_view(t).substr(eq + 1));
      if (key.empty()) throw ConfigError("", "line " + std::to_string(line_no) + " has an empty key");
      if (kv.values_.count(key)) throw ConfigError(key, "duplicate key");
      kv.order_.push_back(key);
      kv.values_.emplace(std::move(key), std::move(value));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, std::string value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(value);
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::vector<std::string>& keys() const { return order_; }

  std::string text() const {
    std::string out;
    for (const auto& k : order_) out += k + "=" + values_.at(k) + "\n";
    return out;
  }

  // Typed accessors. Each consumes the key.
  std::string str(const std::string& key, const std::string& fallback) { return take(key).value_or(fallback); }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    auto v = take(key);
    return v ? parse_u64(key, *v) : fallback;
  }
  std::size_t size(const std::string& key, std::size_t fallback) {
    return static_cast<std::size_t>(u64(key, fallback));
  }
  double real(const std::string& key, double fallback) {
    auto v = take(key);
    return v ? parse_real(key, *v) : fallback;
  }
  std::vector<std::size_t> sizes(const std::string& key, const std::vector<std::size_t>& fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    for (const auto& item : detail::split(*v, ',')) out.push_back(static_cast<std::size_t>(parse_u64(key, item)));
    return out;
  }
  std::vector<std::string> list(const std::string& key, char sep, const std::vector<std::string>& fallback) {
    auto v = take(key);
    return v ? detail::split(*v, sep) : fallback;
  }

  // Throws on the first key that no reader consumed.
  void finish() const {
    for (const auto& k : order_)
      if (!consumed_.count(k)) throw ConfigError(k, "unknown key");
  }

  static std::uint64_t parse_u64(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
    return v;
  }
  static double parse_real(const std::string& key, const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw ConfigError(key, "expected a real number, got '" + s + "'");
    return v;
  }

 private:
  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    consumed_.insert(key);
    return it->second;
  }

  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

// Shortest decimal text that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace rrn
