// SPDX-License-Identifier: Apache-2.0
#include "synhat/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace synhat::eval {

namespace {

constexpr double kEarthRadius = 6371008.8;
constexpr double kDeg = M_PI / 180.0;

std::size_t index_of(Metric m) { return static_cast<std::size_t>(m); }

// Kuhn's augmenting paths over the tolerance graph.
bool augment(int u, const std::vector<std::vector<int>>& adj, std::vector<int>& match_r, std::vector<char>& seen) {
  for (int v : adj[u]) {
    if (seen[v]) continue;
    seen[v] = 1;
    if (match_r[v] < 0 || augment(match_r[v], adj, match_r, seen)) {
      match_r[v] = u;
      return true;
    }
  }
  return false;
}

struct Box {
  double lat0, lat1, lon0, lon1;
  Seconds t0, t1;
};

Box box_of(const Hat& h) {
  Box b{90, -90, 180, -180, 0, 0};
  if (h.events.empty()) return b;
  b.t0 = h.events.front().t;
  b.t1 = h.events.front().t;
  for (const Event& e : h.events) {
    b.lat0 = std::min(b.lat0, e.lat);
    b.lat1 = std::max(b.lat1, e.lat);
    b.lon0 = std::min(b.lon0, e.lon);
    b.lon1 = std::max(b.lon1, e.lon);
    b.t0 = std::min(b.t0, e.t);
    b.t1 = std::max(b.t1, e.t);
  }
  return b;
}

// Conservative test that no event pair can be within tolerance.
bool boxes_apart(const Box& a, const Box& b, const PrivacyConfig& cfg) {
  if (a.t0 - b.t1 > cfg.tr_t || b.t0 - a.t1 > cfg.tr_t) return true;
  const double dlat = std::max({a.lat0 - b.lat1, b.lat0 - a.lat1, 0.0});
  return dlat * kDeg * kEarthRadius > cfg.tr_s;
}

}  // namespace

double haversine_m(Coord a, Coord b) {
  const double dlat = (b.lat - a.lat) * kDeg, dlon = (b.lon - a.lon) * kDeg;
  const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(a.lat * kDeg) * std::cos(b.lat * kDeg) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadius * std::asin(std::min(1.0, std::sqrt(s)));
}

TraceStats trace_statistics(const Hat& h) {
  TraceStats s;
  s.length = static_cast<int>(h.events.size());
  if (h.events.empty()) return s;
  Coord centroid;
  for (const Event& e : h.events) {
    centroid.lat += e.lat / s.length;
    centroid.lon += e.lon / s.length;
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < h.events.size(); ++i) {
    const double r = haversine_m(h.events[i].coord(), centroid);
    sq += r * r;
    if (i > 0) {
      s.distances.push_back(haversine_m(h.events[i - 1].coord(), h.events[i].coord()));
      s.intervals.push_back(static_cast<double>(h.events[i].t - h.events[i - 1].t));
    }
  }
  s.radius = std::sqrt(sq / s.length);
  return s;
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::Distance: return "distance";
    case Metric::Radius: return "radius";
    case Metric::Interval: return "interval";
    case Metric::Length: return "length";
  }
  return "?";
}

MetricHistogram histogram(Metric m, const std::vector<double>& values, double lo, double hi, int bins) {
  if (bins < 1) throw std::invalid_argument("histogram needs at least one bin");
  if (!(hi > lo)) hi = lo + 1.0;
  MetricHistogram h;
  h.metric = m;
  h.edges.resize(bins + 1);
  for (int i = 0; i <= bins; ++i) h.edges[i] = lo + (hi - lo) * i / bins;
  h.probabilities.assign(bins, 0.0);
  std::size_t n = 0;
  for (double v : values) {
    if (v < lo || v > hi) continue;
    const int b = std::min(static_cast<int>((v - lo) / (hi - lo) * bins), bins - 1);
    h.probabilities[b] += 1.0;
    ++n;
  }
  if (n > 0)
    for (double& p : h.probabilities) p /= static_cast<double>(n);
  return h;
}

double jsd(const MetricHistogram& p, const MetricHistogram& q, double smoothing) {
  if (p.edges != q.edges) throw std::invalid_argument("jsd: histograms have different bin edges");
  const std::size_t n = p.probabilities.size();
  auto smooth = [&](const std::vector<double>& v) {
    std::vector<double> s(v);
    double total = 0.0;
    for (double& x : s) {
      if (x <= 0.0) x = smoothing;
      total += x;
    }
    for (double& x : s) x /= total;
    return s;
  };
  const auto a = smooth(p.probabilities), b = smooth(q.probabilities);
  double kl_a = 0.0, kl_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = 0.5 * (a[i] + b[i]);
    kl_a += a[i] * std::log2(a[i] / m);
    kl_b += b[i] * std::log2(b[i] / m);
  }
  return std::clamp(0.5 * kl_a + 0.5 * kl_b, 0.0, 1.0);
}

std::vector<double> metric_values(const std::vector<Hat>& corpus, Metric m) {
  std::vector<double> out;
  for (const Hat& h : corpus) {
    const TraceStats s = trace_statistics(h);
    switch (m) {
      case Metric::Distance: out.insert(out.end(), s.distances.begin(), s.distances.end()); break;
      case Metric::Radius: out.push_back(s.radius); break;
      case Metric::Interval: out.insert(out.end(), s.intervals.begin(), s.intervals.end()); break;
      case Metric::Length: out.push_back(s.length); break;
    }
  }
  return out;
}

FidelityReport fidelity_report(const std::vector<Hat>& real, const std::vector<Hat>& synth, int bins) {
  if (real.empty() || synth.empty()) throw std::invalid_argument("fidelity_report needs two non-empty corpora");
  FidelityReport r;
  for (Metric m : kMetrics) {
    const auto rv = metric_values(real, m), sv = metric_values(synth, m);
    double lo = 0.0, hi = 0.0;
    bool any = false;
    for (const auto* v : {&rv, &sv})
      for (double x : *v) {
        lo = any ? std::min(lo, x) : x;
        hi = any ? std::max(hi, x) : x;
        any = true;
      }
    const auto hr = histogram(m, rv, lo, hi, bins), hs = histogram(m, sv, lo, hi, bins);
    const std::size_t k = index_of(m);
    r.jsd[k] = jsd(hr, hs);
    CdfCurve& c = r.cdf[k];
    double ar = 0.0, as = 0.0;
    for (int b = 0; b < bins; ++b) {
      ar += hr.probabilities[b];
      as += hs.probabilities[b];
      c.x.push_back(hr.edges[b + 1]);
      c.real.push_back(ar);
      c.synth.push_back(as);
    }
  }
  r.average = std::accumulate(r.jsd.begin(), r.jsd.end(), 0.0) / 4.0;
  return r;
}

nlohmann::json FidelityReport::to_json() const {
  nlohmann::json j;
  for (Metric m : kMetrics) j[metric_name(m)] = jsd[index_of(m)];
  j["average"] = average;
  for (Metric m : kMetrics) {
    const CdfCurve& c = cdf[index_of(m)];
    j["cdf"][metric_name(m)] = {{"x", c.x}, {"real", c.real}, {"synth", c.synth}};
  }
  return j;
}

void FidelityReport::write_csv(std::ostream& out) const {
  out << "metric,jsd\n";
  for (Metric m : kMetrics) out << metric_name(m) << ',' << jsd[index_of(m)] << '\n';
  out << "average," << average << '\n';
}

void FidelityReport::write_cdf_csv(std::ostream& out) const {
  out << "metric,x,real_cdf,synth_cdf\n";
  for (Metric m : kMetrics) {
    const CdfCurve& c = cdf[index_of(m)];
    for (std::size_t i = 0; i < c.x.size(); ++i)
      out << metric_name(m) << ',' << c.x[i] << ',' << c.real[i] << ',' << c.synth[i] << '\n';
  }
}

int matched_events(const Hat& a, const Hat& b, const PrivacyConfig& cfg) {
  std::vector<std::vector<int>> adj(a.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i)
    for (std::size_t j = 0; j < b.events.size(); ++j) {
      const Event& x = a.events[i];
      const Event& y = b.events[j];
      if (std::abs(static_cast<double>(x.t - y.t)) <= cfg.tr_t && haversine_m(x.coord(), y.coord()) <= cfg.tr_s)
        adj[i].push_back(static_cast<int>(j));
    }
  std::vector<int> match_r(b.events.size(), -1);
  int matched = 0;
  for (std::size_t i = 0; i < a.events.size(); ++i) {
    if (adj[i].empty()) continue;
    std::vector<char> seen(b.events.size(), 0);
    if (augment(static_cast<int>(i), adj, match_r, seen)) ++matched;
  }
  return matched;
}

double similarity(const Hat& a, const Hat& b, const PrivacyConfig& cfg) {
  const int n1 = static_cast<int>(a.events.size()), n2 = static_cast<int>(b.events.size());
  if (n1 + n2 == 0) return 0.0;
  const int m = matched_events(a, b, cfg);
  return static_cast<double>(m) / (n1 + n2 - m);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * (values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (rank - lo) * (values[hi] - values[lo]);
}

PrivacyReport privacy_report(const std::vector<Hat>& synth, const std::vector<Hat>& train, const PrivacyConfig& cfg,
                             std::mt19937_64& rng) {
  if (synth.empty()) throw std::invalid_argument("privacy_report needs synthetic traces");
  std::vector<std::size_t> order(synth.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min(cfg.sample_count, synth.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<Box> boxes;
  boxes.reserve(train.size());
  for (const Hat& t : train) boxes.push_back(box_of(t));

  PrivacyReport r;
  for (std::size_t i = 0; i < k; ++i) {
    const Hat& s = synth[order[i]];
    const Box sb = box_of(s);
    double best = 0.0;
    for (std::size_t j = 0; j < train.size() && best < 1.0; ++j) {
      if (boxes_apart(sb, boxes[j], cfg)) continue;
      best = std::max(best, similarity(s, train[j], cfg));
    }
    r.max_similarity.push_back(best);
  }
  r.cdf_x = r.max_similarity;
  std::sort(r.cdf_x.begin(), r.cdf_x.end());
  for (std::size_t i = 0; i < r.cdf_x.size(); ++i) r.cdf_y.push_back(static_cast<double>(i + 1) / r.cdf_x.size());
  r.p95 = percentile(r.max_similarity, 95.0);
  return r;
}

nlohmann::json PrivacyReport::to_json(const PrivacyConfig& cfg) const {
  return {{"tr_s_m", cfg.tr_s}, {"tr_t_s", cfg.tr_t},     {"count", max_similarity.size()},
          {"p95", p95},         {"max_similarity", max_similarity}, {"cdf", {{"x", cdf_x}, {"y", cdf_y}}}};
}

void PrivacyReport::write_csv(std::ostream& out) const {
  out << "max_similarity,cdf\n";
  for (std::size_t i = 0; i < cdf_x.size(); ++i) out << cdf_x[i] << ',' << cdf_y[i] << '\n';
}

}  // namespace synhat::eval
