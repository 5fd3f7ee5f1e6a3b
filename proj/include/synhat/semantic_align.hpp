// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "synhat/data_model.hpp"

namespace synhat::align {

/// Local equirectangular projection to meters around a reference point.
struct Projection {
  Coord origin;
  double x(Coord c) const;
  double y(Coord c) const;
};

/// POIs with a point-quadtree over projected coordinates.
class PoiIndex {
 public:
  explicit PoiIndex(std::vector<Poi> pois, int leaf_capacity = 16);

  /// Indices of POIs within `radius_m` (Euclidean, projected meters), sorted.
  std::vector<std::size_t> radius_query(Coord c, double radius_m) const;
  /// Same answer by scanning every POI.
  std::vector<std::size_t> brute_force(Coord c, double radius_m) const;

  const std::vector<Poi>& pois() const { return pois_; }
  /// Index of a POI id, or -1.
  long find(const std::string& id) const;
  const Projection& projection() const { return proj_; }
  double distance_m(Coord a, std::size_t poi) const;

 private:
  struct Node {
    double x0, y0, x1, y1;
    std::vector<std::size_t> items;
    std::unique_ptr<Node> child[4];
  };
  void insert(Node& n, std::size_t i, int depth);
  void query(const Node& n, double x, double y, double r2, std::vector<std::size_t>& out) const;

  std::vector<Poi> pois_;
  std::vector<double> xs_, ys_;
  std::unordered_map<std::string, std::size_t> by_id_;
  Projection proj_;
  int leaf_capacity_;
  std::unique_ptr<Node> root_;
};

/// Collects the distinct POIs of a corpus (first coordinate seen wins).
std::vector<Poi> pois_from_corpus(const std::vector<Hat>& corpus);

enum class KernelKind { Gaussian, Exponential };

/// Per-POI visit counts in time-of-week bins, smoothed by a truncated kernel.
struct VisitHistory {
  Seconds bin_seconds = 3600;
  int bins = 168;  // one week
  Seconds bandwidth = 3600;
  int radius_bins = 2;
  KernelKind kernel = KernelKind::Gaussian;
  /// counts[poi index] has `bins` entries; POIs never visited are absent.
  std::unordered_map<std::size_t, std::vector<double>> counts;

  static VisitHistory build(const std::vector<Hat>& train, const PoiIndex& index);
  int bin_of(Seconds t) const;
  /// K(dt) for a time offset in seconds.
  double kernel_at(double dt) const;

  /// `meta` is stored verbatim under "meta" when not null.
  void save(const std::filesystem::path& path, const PoiIndex& index, const nlohmann::json& meta = {}) const;
  static VisitHistory load(const std::filesystem::path& path, const PoiIndex& index);
};

inline constexpr int kVisitHistoryVersion = 1;

/// d_i(t) = sum over bins tau within radius_bins of t's bin of K(t - tau) v_i(tau),
/// with t - tau measured between bins.
std::vector<double> temporal_density(const std::vector<std::size_t>& candidates, Seconds t,
                                     const VisitHistory& history);

/// P(a_i | t) = d_i / sum_j d_j; uniform when every density is zero.
std::vector<double> activity_probabilities(const std::vector<double>& densities);

/// Categorical draw proportional to densities; uniform when all are zero.
std::size_t sample_activity(const std::vector<std::size_t>& candidates, const std::vector<double>& densities,
                            std::mt19937_64& rng);

struct AlignConfig {
  double radius_m = 200.0;
  int max_doublings = 3;
};

struct AlignResult {
  Hat hat;
  std::size_t dropped = 0;
  /// Search radius used for each emitted event.
  std::vector<double> radius_used;
};

/// One event per fine state (in order); states with no POI inside the
/// escalated radius are dropped and counted.
AlignResult align(const FineStates& states, const PoiIndex& index, const VisitHistory& history,
                  const AlignConfig& cfg, std::mt19937_64& rng);

}  // namespace synhat::align
