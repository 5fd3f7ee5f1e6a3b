// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "synhat/data_model.hpp"

namespace synhat::eval {

/// Great-circle distance in meters.
double haversine_m(Coord a, Coord b);

struct TraceStats {
  std::vector<double> distances;  // meters between consecutive events
  double radius = 0.0;            // RMS distance to the centroid, meters
  std::vector<double> intervals;  // seconds between consecutive events
  int length = 0;
};

TraceStats trace_statistics(const Hat& h);

enum class Metric { Distance, Radius, Interval, Length };
inline constexpr std::array<Metric, 4> kMetrics{Metric::Distance, Metric::Radius, Metric::Interval, Metric::Length};
std::string metric_name(Metric m);

struct MetricHistogram {
  Metric metric = Metric::Distance;
  std::vector<double> edges;  // bins + 1 entries
  std::vector<double> probabilities;
};

/// Equal-width histogram over [lo, hi]; the top edge is inclusive.
MetricHistogram histogram(Metric m, const std::vector<double>& values, double lo, double hi, int bins = 50);

/// Base-2 Jensen-Shannon divergence after smoothing empty bins by `smoothing`.
/// Throws when the bin edges differ.
double jsd(const MetricHistogram& p, const MetricHistogram& q, double smoothing = 1e-10);

/// Pooled per-metric sample for a corpus.
std::vector<double> metric_values(const std::vector<Hat>& corpus, Metric m);

struct CdfCurve {
  std::vector<double> x;  // upper bin edges
  std::vector<double> real;
  std::vector<double> synth;
};

struct FidelityReport {
  std::array<double, 4> jsd{};
  double average = 0.0;
  std::array<CdfCurve, 4> cdf;
  nlohmann::json to_json() const;
  void write_csv(std::ostream& out) const;
  void write_cdf_csv(std::ostream& out) const;
};

/// JSD per metric with 50 bins over the pooled real and synthetic range.
FidelityReport fidelity_report(const std::vector<Hat>& real, const std::vector<Hat>& synth, int bins = 50);

struct PrivacyConfig {
  double tr_s = 200.0;   // meters
  double tr_t = 1800.0;  // seconds
  std::size_t sample_count = 1500;
};

/// N_matched / (N1 + N2 - N_matched) with a maximum one-to-one matching of
/// events within both tolerances.
double similarity(const Hat& a, const Hat& b, const PrivacyConfig& cfg);
/// Size of the maximum matching behind `similarity`.
int matched_events(const Hat& a, const Hat& b, const PrivacyConfig& cfg);

/// Linear-interpolation percentile (q in [0,100]).
double percentile(std::vector<double> values, double q);

struct PrivacyReport {
  std::vector<double> max_similarity;  // one per sampled synthetic trace
  std::vector<double> cdf_x;
  std::vector<double> cdf_y;
  double p95 = 0.0;
  nlohmann::json to_json(const PrivacyConfig& cfg) const;
  void write_csv(std::ostream& out) const;
};

/// Samples min(sample_count, |synth|) synthetic traces without replacement and
/// records each one's maximum similarity to any training trace.
PrivacyReport privacy_report(const std::vector<Hat>& synth, const std::vector<Hat>& train, const PrivacyConfig& cfg,
                             std::mt19937_64& rng);

}  // namespace synhat::eval
