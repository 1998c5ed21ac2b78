// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "drg/errors.hpp"

namespace drg {

/// Flat key=value configuration. '#' starts a comment; whitespace around
/// keys and values is trimmed. Documented keys: method, factors, batch_size,
/// lr, epochs, seed, dataset_root, output_dir.
class Config {
 public:
  static Config parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path.string());
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config: " + path.string() + ":" +
                          std::to_string(lineno) + ": expected key=value");
      const std::string key = trim(trimmed.substr(0, eq));
      if (key.empty())
        throw ConfigError("config: " + path.string() + ":" +
                          std::to_string(lineno) + ": empty key");
      cfg.values_[key] = trim(trimmed.substr(eq + 1));
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  /// Command-line flags override file values.
  void set(const std::string& key, std::string value) {
    values_[key] = std::move(value);
  }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end() || it->second.empty())
      throw ConfigError("config: missing required key \"" + key + "\"");
    return it->second;
  }

  int get_int(const std::string& key, int fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const int v = std::stoi(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key + "\" is not an integer: " +
                        it->second);
    }
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key + "\" is not a number: " +
                        it->second);
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("config: key \"" + key +
                        "\" is not an unsigned integer: " + it->second);
    }
  }

  /// Comma-separated ascending integer list, e.g. "1,2,4,6,8".
  std::vector<int> get_factors(const std::string& key,
                               std::vector<int> fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int> out;
    std::istringstream ss(it->second);
    std::string field;
    while (std::getline(ss, field, ',')) {
      try {
        std::size_t pos = 0;
        const std::string t = trim(field);
        const int v = std::stoi(t, &pos);
        if (pos != t.size()) throw std::invalid_argument("trailing");
        out.push_back(v);
      } catch (const std::exception&) {
        throw ConfigError("config: key \"" + key +
                          "\" is not a factor list: " + it->second);
      }
    }
    if (out.empty())
      throw ConfigError("config: key \"" + key + "\" is empty");
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace drg
