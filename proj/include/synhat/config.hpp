// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace synhat {

/// Parse or validation failure carrying the source line (0 when the value
/// came from an override or a default).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& where, int line, const std::string& what);
  int line() const { return line_; }

 private:
  int line_;
};

/// TOML-style flat key/value file. `[section]` headers prefix the following
/// keys as "section.key". Values are scalars: numbers, booleans, bare words
/// or double-quoted strings; `#` starts a comment.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& origin = "<string>");
  static FlatConfig load(const std::filesystem::path& path);

  /// "key=value" as passed to --override.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value, int line = 0);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
  int line_of(const std::string& key) const;

  /// Sorted "key=value\n" lines; the input to the config hash.
  std::string canonical() const;
  std::uint64_t hash() const;
  const std::string& origin() const { return origin_; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::string origin_ = "<defaults>";
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

}  // namespace synhat
