// SPDX-License-Identifier: Apache-2.0
#include "synhat/ingest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "synhat/config.hpp"

namespace synhat::ingest {

namespace {

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    out.push_back(field);
  }
  return out;
}

bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

std::int64_t days_to_unix(int y, unsigned m, unsigned d) {
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{m}, day{d}};
  if (!ymd.ok()) throw std::invalid_argument("invalid calendar date");
  return sys_days{ymd}.time_since_epoch().count() * 86400LL;
}

int month_from_abbrev(const std::string& m) {
  static const char* kMonths[] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                  "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
  for (int i = 0; i < 12; ++i)
    if (m == kMonths[i]) return i + 1;
  return 0;
}

// "Tue Apr 03 18:00:09 +0000 2012"
std::optional<std::int64_t> parse_foursquare_time(const std::string& s) {
  std::istringstream in(s);
  std::string dow, mon, hms, zone;
  int day = 0, year = 0;
  if (!(in >> dow >> mon >> day >> hms >> zone >> year)) return std::nullopt;
  const int m = month_from_abbrev(mon);
  int hh = 0, mm = 0, ss = 0;
  if (m == 0 || std::sscanf(hms.c_str(), "%d:%d:%d", &hh, &mm, &ss) != 3) return std::nullopt;
  try {
    return days_to_unix(year, static_cast<unsigned>(m), static_cast<unsigned>(day)) + hh * 3600 + mm * 60 + ss;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// "2010-10-19T23:55:27Z"
std::optional<std::int64_t> parse_iso_time(const std::string& s) {
  int y = 0, mo = 0, d = 0, hh = 0, mm = 0, ss = 0;
  if (std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &hh, &mm, &ss) != 6) return std::nullopt;
  try {
    return days_to_unix(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) + hh * 3600 + mm * 60 + ss;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

SourceFormat parse_format(const std::string& tag) {
  if (tag == "foursquare_tsv") return SourceFormat::FoursquareTsv;
  if (tag == "gowalla_tsv") return SourceFormat::GowallaTsv;
  if (tag == "jsonl") return SourceFormat::Jsonl;
  throw std::invalid_argument("unknown source format '" + tag + "'");
}

std::string format_name(SourceFormat f) {
  switch (f) {
    case SourceFormat::FoursquareTsv: return "foursquare_tsv";
    case SourceFormat::GowallaTsv: return "gowalla_tsv";
    case SourceFormat::Jsonl: return "jsonl";
  }
  return "?";
}

std::int64_t parse_date(const std::string& ymd) {
  int y = 0, m = 0, d = 0;
  char tail = 0;
  if (std::sscanf(ymd.c_str(), "%d-%d-%d%c", &y, &m, &d, &tail) != 3)
    throw std::invalid_argument("expected YYYY-MM-DD, got '" + ymd + "'");
  return days_to_unix(y, static_cast<unsigned>(m), static_cast<unsigned>(d));
}

void validate(const IngestConfig& cfg) {
  if (cfg.min_visits < 1) throw std::invalid_argument("min_visits must be >= 1");
  if (cfg.duration <= 0) throw std::invalid_argument("duration must be positive");
  if (parse_date(cfg.window_end) <= parse_date(cfg.window_start))
    throw std::invalid_argument("window_end (" + cfg.window_end + ") must be after window_start (" +
                                cfg.window_start + ")");
  if (cfg.bbox.min_lat > cfg.bbox.max_lat || cfg.bbox.min_lon > cfg.bbox.max_lon)
    throw std::invalid_argument("empty bounding box");
}

IngestConfig city_preset(const std::string& city) {
  IngestConfig c;
  if (city == "nyc") {
    c.window_start = "2012-04-01";
    c.window_end = "2012-07-01";
    c.duration = 14 * 86400;
    c.bbox = {40.55, 40.99, -74.28, -73.68};
  } else if (city == "tky") {
    c.window_start = "2012-04-01";
    c.window_end = "2012-07-01";
    c.duration = 28 * 86400;
    c.bbox = {35.50, 35.90, 139.45, 139.95};
  } else if (city == "atx") {
    c.window_start = "2012-04-01";
    c.window_end = "2012-07-01";
    c.duration = 7 * 86400;
    c.bbox = {30.10, 30.60, -98.00, -97.50};
  } else if (city == "sto") {
    c.format = SourceFormat::GowallaTsv;
    c.window_start = "2009-02-01";
    c.window_end = "2010-11-01";
    c.duration = 56 * 86400;
    c.bbox = {59.20, 59.50, 17.80, 18.30};
  } else {
    throw std::invalid_argument("unknown city preset '" + city + "' (nyc, tky, atx, sto)");
  }
  return c;
}

std::optional<Checkin> parse_row(const std::string& line, SourceFormat format) {
  Checkin c;
  switch (format) {
    case SourceFormat::FoursquareTsv: {
      // user, venue, category id, category name, lat, lon, tz offset (min), utc time
      const auto f = split_fields(line, '\t');
      if (f.size() != 8) return std::nullopt;
      double tz = 0;
      if (!parse_double(f[4], c.lat) || !parse_double(f[5], c.lon) || !parse_double(f[6], tz)) return std::nullopt;
      auto t = parse_foursquare_time(f[7]);
      if (!t || f[0].empty() || f[1].empty()) return std::nullopt;
      c.user = f[0];
      c.poi = f[1];
      c.time = *t + static_cast<std::int64_t>(tz) * 60;
      break;
    }
    case SourceFormat::GowallaTsv: {
      // user, check-in time, lat, lon, location id
      const auto f = split_fields(line, '\t');
      if (f.size() != 5) return std::nullopt;
      if (!parse_double(f[2], c.lat) || !parse_double(f[3], c.lon)) return std::nullopt;
      auto t = parse_iso_time(f[1]);
      if (!t || f[0].empty() || f[4].empty()) return std::nullopt;
      c.user = f[0];
      c.poi = f[4];
      c.time = *t;
      break;
    }
    case SourceFormat::Jsonl: {
      // {"user", "poi", "lat", "lon", "time"}
      try {
        const auto j = nlohmann::json::parse(line);
        c.user = j.at("user").is_string() ? j.at("user").get<std::string>() : j.at("user").dump();
        c.poi = j.at("poi").is_string() ? j.at("poi").get<std::string>() : j.at("poi").dump();
        c.lat = j.at("lat").get<double>();
        c.lon = j.at("lon").get<double>();
        c.time = j.at("time").get<std::int64_t>();
      } catch (const std::exception&) {
        return std::nullopt;
      }
      if (!std::isfinite(c.lat) || !std::isfinite(c.lon)) return std::nullopt;
      break;
    }
  }
  if (c.lat < -90 || c.lat > 90 || c.lon < -180 || c.lon > 180) return std::nullopt;
  return c;
}

ParseResult parse_checkins(const std::filesystem::path& path, const IngestConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::int64_t start = parse_date(cfg.window_start);
  const std::int64_t end = parse_date(cfg.window_end);
  ParseResult out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++out.rows;
    auto row = parse_row(line, cfg.format);
    if (!row) {
      ++out.malformed;
      continue;
    }
    if (row->time < start || row->time >= end) {
      ++out.outside_window;
      continue;
    }
    if (!cfg.bbox.contains(row->lat, row->lon)) {
      ++out.outside_bbox;
      continue;
    }
    out.by_user[row->user].push_back(std::move(*row));
  }
  return out;
}

std::vector<Hat> build_corpus(const std::map<std::string, std::vector<Checkin>>& by_user,
                              const IngestConfig& cfg) {
  const std::int64_t start = parse_date(cfg.window_start);
  const std::int64_t end = parse_date(cfg.window_end);
  const std::int64_t full_windows = (end - start) / cfg.duration;
  std::vector<Hat> corpus;
  for (const auto& [user, rows] : by_user) {
    std::vector<Checkin> sorted = rows;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Checkin& a, const Checkin& b) { return a.time < b.time; });
    std::map<std::int64_t, std::vector<const Checkin*>> windows;
    for (const Checkin& c : sorted) {
      if (c.time < start) continue;
      const std::int64_t w = (c.time - start) / cfg.duration;
      if (w < full_windows) windows[w].push_back(&c);
    }
    for (const auto& [w, members] : windows) {
      if (static_cast<int>(members.size()) <= cfg.min_visits) continue;
      const std::int64_t origin = start + w * cfg.duration;
      Hat h;
      h.trace_id = user + "#" + std::to_string(w);
      h.duration = cfg.duration;
      for (const Checkin* c : members) h.events.push_back({c->poi, c->lat, c->lon, c->time - origin});
      corpus.push_back(std::move(h));
      if (cfg.one_window_per_user) break;
    }
  }
  return corpus;
}

DatasetSplit split(const std::vector<Hat>& corpus, std::uint64_t seed) {
  if (corpus.size() < 10)
    throw std::invalid_argument("split needs at least 10 traces, got " + std::to_string(corpus.size()));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const std::size_t n = corpus.size();
  const std::size_t n_train = n * 7 / 10;
  const std::size_t n_val = n / 10;
  DatasetSplit s;
  for (std::size_t i = 0; i < n; ++i) {
    const Hat& h = corpus[order[i]];
    if (i < n_train)
      s.train.push_back(h);
    else if (i < n_train + n_val)
      s.val.push_back(h);
    else
      s.test.push_back(h);
  }
  return s;
}

IngestConfig load_ingest_config(const std::filesystem::path& path, const std::string& city) {
  return ingest_config_from_flat(FlatConfig::load(path), city);
}

IngestConfig ingest_config_from_flat(const FlatConfig& fc, const std::string& city) {
  IngestConfig c = city.empty() ? IngestConfig{} : city_preset(city);
  auto wrap = [&](const std::string& key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(fc.origin(), fc.line_of(key), e.what());
    }
  };
  wrap("ingest.format", [&] { c.format = parse_format(fc.get_string("ingest.format", format_name(c.format))); });
  c.window_start = fc.get_string("ingest.window_start", c.window_start);
  c.window_end = fc.get_string("ingest.window_end", c.window_end);
  c.duration = fc.get_int("ingest.duration", c.duration);
  c.min_visits = static_cast<int>(fc.get_int("ingest.min_visits", c.min_visits));
  c.bbox.min_lat = fc.get_double("ingest.min_lat", c.bbox.min_lat);
  c.bbox.max_lat = fc.get_double("ingest.max_lat", c.bbox.max_lat);
  c.bbox.min_lon = fc.get_double("ingest.min_lon", c.bbox.min_lon);
  c.bbox.max_lon = fc.get_double("ingest.max_lon", c.bbox.max_lon);
  c.one_window_per_user = fc.get_bool("ingest.one_window_per_user", c.one_window_per_user);
  wrap("ingest.window_start", [&] { validate(c); });
  return c;
}

}  // namespace synhat::ingest
