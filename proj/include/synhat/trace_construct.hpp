// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <vector>

#include "synhat/data_model.hpp"

namespace synhat::trace {

/// How empty coarse slots between filled ones get their coordinate.
enum class CoordFill {
  Interpolate,  // linear between flanking filled slots (production path)
  Replicate,    // copy the previous slot
  CityMean,     // the city-wide mean event coordinate
};

/// How the coarse mask encodes event slots.
enum class MaskScheme {
  Indicator,  // 1 where the slot holds an event
  Toggle,     // bit flips at every event slot
};

struct CoarseOptions {
  /// Fill for empty slots before the first event.
  Coord dummy;
  CoordFill fill = CoordFill::Interpolate;
  MaskScheme mask = MaskScheme::Indicator;
  /// Used by CoordFill::CityMean.
  Coord city_mean;
};

/// Coordinate of the most frequently visited POI across a corpus (ties go to
/// the smallest POI id).
Coord most_frequent_poi(const std::vector<Hat>& corpus);
/// Mean event coordinate across a corpus.
Coord mean_coordinate(const std::vector<Hat>& corpus);

/// Bins a HAT into L = duration / granularity slots. Throws on an empty HAT or
/// a granularity that does not divide the duration.
LatentSTTrace build_coarse_trace(const Hat& h, Seconds granularity, const CoarseOptions& opts);
LatentSTTrace build_coarse_trace(const Hat& h, Seconds granularity, Coord dummy);

/// Slots whose mask is at least `threshold`, in slot order.
LatentSTStates compress_to_states(const LatentSTTrace& t, double threshold = 0.5);
/// Event slots of a toggle-encoded binary mask.
std::vector<int> toggle_event_slots(const std::vector<double>& mask);

/// One coarse slot resampled at the fine unit.
struct FineSegment {
  int slot = 0;
  std::vector<Coord> coords;  // length granularity / kFineUnit
  std::vector<double> mask;
};

/// Fine-resolution target for an active slot: piecewise-linear through the
/// half-slot-away neighbour anchors and the in-slot events (one per minute
/// cell, coordinates averaged within a cell). Edge slots use their own mean
/// as the missing neighbour.
FineSegment build_fine_segment(const Hat& h, const LatentSTTrace& coarse, int slot);

/// A mask-active fine cell.
struct FineCell {
  Coord coord;
  int slot = 0;
  int cell = 0;
};

/// Places fine cells on the absolute time axis: t = slot * granularity + cell * 60.
FineStates states_to_hat_skeleton(const std::vector<FineCell>& cells, Seconds granularity);

/// Cells of a generated segment whose mask is at least `threshold`.
std::vector<FineCell> fine_cells(const FineSegment& seg, double threshold = 0.7);

/// Per-city zero-mean, unit-variance coordinate scaling.
struct Normalizer {
  Coord mean;
  Coord stddev{1.0, 1.0};

  static Normalizer fit(const std::vector<Hat>& corpus);
  Coord forward(Coord c) const;
  Coord inverse(Coord c) const;
};

/// Indices i of a regularly sampled trajectory where the heading turns by more
/// than `theta_threshold` radians between (c[i-1], c[i]) and (c[i], c[i+1]).
/// Used to turn continuous-trajectory outputs into activity candidates.
std::vector<int> turning_points(const std::vector<Coord>& path, double theta_threshold);

/// "slot,lat,lon,mask" rows with a header.
void write_coarse_csv(std::ostream& out, const LatentSTTrace& t);

}  // namespace synhat::trace
