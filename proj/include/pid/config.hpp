#pragma once

// Flat key=value run configuration for the command-line tool.
//
// Format: UTF-8 text, one "key=value" per line. Blank lines are skipped and
// "#" starts a comment (full-line or trailing). Whitespace around keys and
// values is trimmed. Later assignments win, so a --set override merged after
// a file simply replaces the file's value. echo() emits the resolved
// configuration sorted by key, and feeding that text back through from_file
// reproduces the run.

#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace pid::cli {

// Bad key, bad value, or malformed config text. Maps to process exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A stage was requested before the stage that produces its inputs ran
// (e.g. physics-weighted training without a decomposition checkpoint).
// Maps to process exit code 3.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A referenced file (checkpoint, dataset, input image) does not exist.
// Maps to process exit code 4.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b])) != 0) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])) != 0) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() = default;

  // Parses config text. `origin` names the source in error messages
  // (a file path or e.g. "--set").
  static RunConfig parse(std::istream& is, const std::string& origin) {
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + " line " + std::to_string(lineno) +
                          ": expected key=value, got \"" + line + "\"");
      }
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(origin + " line " + std::to_string(lineno) + ": empty key");
      }
      cfg.set(key, value);
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Parses a single "key=value" assignment (for command-line overrides).
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override \"" + kv + "\": expected key=value");
    }
    const std::string key = detail::trim(kv.substr(0, eq));
    if (key.empty()) throw ConfigError("override \"" + kv + "\": empty key");
    set(key, detail::trim(kv.substr(eq + 1)));
  }

  // Overlays `other` on top of this config (other's values win).
  void merge(const RunConfig& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  // Rejects any key not in `allowed`, naming the offending key.
  void check_allowed(const std::set<std::string>& allowed) const {
    for (const auto& [k, v] : values_) {
      if (allowed.count(k) == 0) {
        throw ConfigError("unknown config key \"" + k + "\"");
      }
    }
  }

  const std::string& get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  const std::string& require_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key \"" + key + "\"");
    return it->second;
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_int(key, it->second);
  }

  long long require_int(const std::string& key) const {
    return parse_int(key, require_string(key));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_u64(key, it->second);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(key, it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key \"" + key + "\": expected a boolean, got \"" + v + "\"");
  }

  // Resolved configuration, one "key=value" line per entry, sorted by key.
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : values_) {
      out += k;
      out += '=';
      out += v;
      out += '\n';
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static long long parse_int(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const long long r = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config key \"" + key + "\": expected an integer, got \"" + v + "\"");
    }
  }

  static std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const unsigned long long r = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config key \"" + key + "\": expected an unsigned integer, got \"" + v +
                        "\"");
    }
  }

  static double parse_double(const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double r = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config key \"" + key + "\": expected a number, got \"" + v + "\"");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace pid::cli
