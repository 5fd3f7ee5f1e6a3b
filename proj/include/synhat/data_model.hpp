// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace synhat {

/// Seconds. All trace times are offsets from the trace's window start.
using Seconds = std::int64_t;

/// Resolution of synthetic output and fine segments.
inline constexpr Seconds kFineUnit = 60;

struct Coord {
  double lat = 0.0;
  double lon = 0.0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

/// One POI-anchored activity.
struct Event {
  std::string poi;
  double lat = 0.0;
  double lon = 0.0;
  Seconds t = 0;
  Coord coord() const { return {lat, lon}; }
  friend bool operator==(const Event&, const Event&) = default;
};

/// Human activity trace: time-ordered events inside [0, duration).
struct Hat {
  std::string trace_id;
  std::vector<Event> events;
  Seconds duration = 0;
  friend bool operator==(const Hat&, const Hat&) = default;
};

struct Poi {
  std::string id;
  double lat = 0.0;
  double lon = 0.0;
};

/// Regular-grid coarse (or fine) latent trace. `mask` is {0,1} when built
/// from data and continuous in [0,1] when decoded from a generator.
struct LatentSTTrace {
  Seconds granularity = 0;
  std::vector<Coord> coords;
  std::vector<double> mask;
  std::size_t length() const { return coords.size(); }
};

/// Mask-active subset of a coarse trace.
struct LatentState {
  Coord coord;
  int slot = 0;
  friend bool operator==(const LatentState&, const LatentState&) = default;
};
using LatentSTStates = std::vector<LatentState>;

/// Mask-active cell of a fine segment, placed on the absolute time axis.
struct FineState {
  Coord coord;
  Seconds t = 0;
  friend bool operator==(const FineState&, const FineState&) = default;
};
using FineStates = std::vector<FineState>;

struct DatasetSplit {
  std::vector<Hat> train;
  std::vector<Hat> val;
  std::vector<Hat> test;
};

/// Human-readable invariant violations; empty when the trace is valid.
std::vector<std::string> validate_hat(const Hat& h);

// Canonical interchange: JSON Lines, one trace per line,
// {"trace_id", "duration", "events": [{"poi", "lat", "lon", "t"}]}.
std::string hat_to_json_line(const Hat& h);
Hat hat_from_json_line(std::string_view line);
std::vector<Hat> read_hats(const std::filesystem::path& path);
void write_hats(const std::filesystem::path& path, const std::vector<Hat>& hats);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace synhat
