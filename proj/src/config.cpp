// SPDX-License-Identifier: Apache-2.0
#include "synhat/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "synhat/data_model.hpp"

namespace synhat {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

}  // namespace

ConfigError::ConfigError(const std::string& where, int line, const std::string& what)
    : std::runtime_error(line > 0 ? where + ":" + std::to_string(line) + ": " + what : where + ": " + what),
      line_(line) {}

FlatConfig FlatConfig::parse(const std::string& text, const std::string& origin) {
  FlatConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin, lineno, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(origin, lineno, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin, lineno, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin, lineno, "missing key");
    if (value.empty()) throw ConfigError(origin, lineno, "missing value for '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.values_.count(full)) throw ConfigError(origin, lineno, "duplicate key '" + full + "'");
    cfg.set(full, unquote(value), lineno);
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

void FlatConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--override", 0, "expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), unquote(trim(assignment.substr(eq + 1))), 0);
}

void FlatConfig::set(const std::string& key, const std::string& value, int line) {
  values_[key] = value;
  lines_[key] = line;
}

int FlatConfig::line_of(const std::string& key) const {
  auto it = lines_.find(key);
  return it == lines_.end() ? 0 : it->second;
}

std::string FlatConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(origin_, line_of(key), "'" + key + "' is not a number: " + it->second);
  }
}

std::int64_t FlatConfig::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::int64_t v = 0;
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError(origin_, line_of(key), "'" + key + "' is not an integer: " + s);
  return v;
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError(origin_, line_of(key), "'" + key + "' is not a boolean: " + it->second);
}

std::vector<int> FlatConfig::get_int_list(const std::string& key, const std::vector<int>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string s = it->second;
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<int> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    int v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size())
      throw ConfigError(origin_, line_of(key), "'" + key + "' has a non-integer element: " + item);
    out.push_back(v);
  }
  return out;
}

std::string FlatConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

std::uint64_t FlatConfig::hash() const { return fnv1a64(canonical()); }

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace synhat
