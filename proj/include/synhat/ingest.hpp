// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "synhat/config.hpp"
#include "synhat/data_model.hpp"

namespace synhat::ingest {

enum class SourceFormat { FoursquareTsv, GowallaTsv, Jsonl };

SourceFormat parse_format(const std::string& tag);
std::string format_name(SourceFormat f);

struct BoundingBox {
  double min_lat = -90.0;
  double max_lat = 90.0;
  double min_lon = -180.0;
  double max_lon = 180.0;
  bool contains(double lat, double lon) const {
    return lat >= min_lat && lat <= max_lat && lon >= min_lon && lon <= max_lon;
  }
};

struct IngestConfig {
  SourceFormat format = SourceFormat::FoursquareTsv;
  std::string window_start;  // YYYY-MM-DD, inclusive
  std::string window_end;    // YYYY-MM-DD, exclusive
  Seconds duration = 14 * 86400;
  int min_visits = 5;
  BoundingBox bbox;
  /// Keep only each user's first qualifying window instead of all of them.
  bool one_window_per_user = false;
};

/// Throws std::invalid_argument naming the offending field.
void validate(const IngestConfig& cfg);

/// City presets mirroring the four evaluation corpora.
IngestConfig city_preset(const std::string& city);

/// Unix seconds at 00:00 UTC of a YYYY-MM-DD date.
std::int64_t parse_date(const std::string& ymd);

struct Checkin {
  std::string user;
  std::string poi;
  double lat = 0.0;
  double lon = 0.0;
  std::int64_t time = 0;  // unix seconds (local time where the source has an offset)
};

struct ParseResult {
  std::map<std::string, std::vector<Checkin>> by_user;  // ordered by user id
  std::size_t rows = 0;
  std::size_t malformed = 0;
  std::size_t outside_window = 0;
  std::size_t outside_bbox = 0;
};

/// Parses one raw row; nullopt when malformed.
std::optional<Checkin> parse_row(const std::string& line, SourceFormat format);

/// Reads a check-in dump, keeping rows inside the window and the bounding box.
/// Malformed rows are counted and skipped.
ParseResult parse_checkins(const std::filesystem::path& path, const IngestConfig& cfg);

/// Cuts each user's check-ins into consecutive full windows of cfg.duration
/// starting at cfg.window_start; windows with more than cfg.min_visits
/// events become HATs with times rebased to the window start.
std::vector<Hat> build_corpus(const std::map<std::string, std::vector<Checkin>>& by_user,
                              const IngestConfig& cfg);

/// Seeded 7:1:2 split; floor for train and val, remainder to test.
DatasetSplit split(const std::vector<Hat>& corpus, std::uint64_t seed);

/// Flat key = value config file (TOML subset) mapped onto IngestConfig.
IngestConfig load_ingest_config(const std::filesystem::path& path, const std::string& city);
/// Same mapping over an already parsed config; `ingest.*` keys override the preset.
IngestConfig ingest_config_from_flat(const FlatConfig& fc, const std::string& city);

}  // namespace synhat::ingest
