// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "synhat/data_model.hpp"

namespace synhat::toy {

/// Scripted commuter city on a 5x5 POI grid with roughly 1 km spacing. Each
/// trace covers one week starting Monday 00:00 and holds at most one event
/// per hour, except that gym-goers (who train Tuesday and Thursday evening)
/// check in twice during their first office hour.
struct ToyCity {
  std::vector<Poi> pois;
  std::vector<Hat> traces;
  Seconds duration = 7 * 86400;
};

inline constexpr int kGridSide = 5;
inline constexpr double kGridStepLat = 0.009;
inline constexpr double kGridStepLon = 0.0118;

ToyCity make_toy_city(std::uint64_t seed = 7, int traces = 200);

/// Seeded random-walk generator: per trace a Poisson event count matching the
/// corpus mean, uniform minute-aligned times, a uniformly chosen start POI
/// and a walk that moves to a uniformly chosen POI within `step_m` meters.
std::vector<Hat> random_walk_baseline(const std::vector<Poi>& pois, const std::vector<Hat>& corpus, int count,
                                      std::uint64_t seed, double step_m = 1600.0);

}  // namespace synhat::toy
