// SPDX-License-Identifier: Apache-2.0
#include "synhat/semantic_align.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace synhat::align {

namespace {

constexpr double kEarthRadius = 6371008.8;
constexpr double kDeg = M_PI / 180.0;
constexpr int kMaxDepth = 24;

}  // namespace

double Projection::x(Coord c) const { return kEarthRadius * (c.lon - origin.lon) * kDeg * std::cos(origin.lat * kDeg); }
double Projection::y(Coord c) const { return kEarthRadius * (c.lat - origin.lat) * kDeg; }

PoiIndex::PoiIndex(std::vector<Poi> pois, int leaf_capacity) : pois_(std::move(pois)), leaf_capacity_(leaf_capacity) {
  if (leaf_capacity_ < 1) throw std::invalid_argument("leaf capacity must be positive");
  double lat = 0.0, lon = 0.0;
  for (std::size_t i = 0; i < pois_.size(); ++i) {
    if (!by_id_.emplace(pois_[i].id, i).second) throw std::invalid_argument("duplicate POI id '" + pois_[i].id + "'");
    lat += pois_[i].lat;
    lon += pois_[i].lon;
  }
  if (!pois_.empty()) proj_.origin = {lat / pois_.size(), lon / pois_.size()};
  xs_.resize(pois_.size());
  ys_.resize(pois_.size());
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  for (std::size_t i = 0; i < pois_.size(); ++i) {
    xs_[i] = proj_.x({pois_[i].lat, pois_[i].lon});
    ys_[i] = proj_.y({pois_[i].lat, pois_[i].lon});
    if (i == 0) {
      x0 = x1 = xs_[i];
      y0 = y1 = ys_[i];
    }
    x0 = std::min(x0, xs_[i]);
    x1 = std::max(x1, xs_[i]);
    y0 = std::min(y0, ys_[i]);
    y1 = std::max(y1, ys_[i]);
  }
  const double side = std::max({x1 - x0, y1 - y0, 1.0});
  root_ = std::make_unique<Node>(Node{x0, y0, x0 + side, y0 + side, {}, {}});
  for (std::size_t i = 0; i < pois_.size(); ++i) insert(*root_, i, 0);
}

void PoiIndex::insert(Node& n, std::size_t i, int depth) {
  if (!n.child[0]) {
    n.items.push_back(i);
    if (static_cast<int>(n.items.size()) <= leaf_capacity_ || depth >= kMaxDepth) return;
    const double mx = 0.5 * (n.x0 + n.x1), my = 0.5 * (n.y0 + n.y1);
    n.child[0] = std::make_unique<Node>(Node{n.x0, n.y0, mx, my, {}, {}});
    n.child[1] = std::make_unique<Node>(Node{mx, n.y0, n.x1, my, {}, {}});
    n.child[2] = std::make_unique<Node>(Node{n.x0, my, mx, n.y1, {}, {}});
    n.child[3] = std::make_unique<Node>(Node{mx, my, n.x1, n.y1, {}, {}});
    auto items = std::move(n.items);
    n.items.clear();
    for (std::size_t j : items) insert(n, j, depth);
    return;
  }
  const double mx = 0.5 * (n.x0 + n.x1), my = 0.5 * (n.y0 + n.y1);
  const int q = (xs_[i] >= mx ? 1 : 0) + (ys_[i] >= my ? 2 : 0);
  insert(*n.child[q], i, depth + 1);
}

void PoiIndex::query(const Node& n, double x, double y, double r2, std::vector<std::size_t>& out) const {
  const double dx = std::max({n.x0 - x, 0.0, x - n.x1});
  const double dy = std::max({n.y0 - y, 0.0, y - n.y1});
  if (dx * dx + dy * dy > r2) return;
  if (!n.child[0]) {
    for (std::size_t i : n.items) {
      const double ex = xs_[i] - x, ey = ys_[i] - y;
      if (ex * ex + ey * ey <= r2) out.push_back(i);
    }
    return;
  }
  for (const auto& c : n.child) query(*c, x, y, r2, out);
}

std::vector<std::size_t> PoiIndex::radius_query(Coord c, double radius_m) const {
  std::vector<std::size_t> out;
  if (pois_.empty() || radius_m < 0) return out;
  query(*root_, proj_.x(c), proj_.y(c), radius_m * radius_m, out);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> PoiIndex::brute_force(Coord c, double radius_m) const {
  std::vector<std::size_t> out;
  if (radius_m < 0) return out;
  const double x = proj_.x(c), y = proj_.y(c), r2 = radius_m * radius_m;
  for (std::size_t i = 0; i < pois_.size(); ++i) {
    const double ex = xs_[i] - x, ey = ys_[i] - y;
    if (ex * ex + ey * ey <= r2) out.push_back(i);
  }
  return out;
}

long PoiIndex::find(const std::string& id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? -1 : static_cast<long>(it->second);
}

double PoiIndex::distance_m(Coord a, std::size_t poi) const { return std::hypot(proj_.x(a) - xs_[poi], proj_.y(a) - ys_[poi]); }

std::vector<Poi> pois_from_corpus(const std::vector<Hat>& corpus) {
  std::map<std::string, Coord> seen;
  for (const Hat& h : corpus)
    for (const Event& e : h.events) seen.emplace(e.poi, e.coord());
  std::vector<Poi> out;
  out.reserve(seen.size());
  for (const auto& [id, c] : seen) out.push_back({id, c.lat, c.lon});
  return out;
}

// ----- visit history -----

VisitHistory VisitHistory::build(const std::vector<Hat>& train, const PoiIndex& index) {
  VisitHistory h;
  for (const Hat& trace : train)
    for (const Event& e : trace.events) {
      const long i = index.find(e.poi);
      if (i < 0) continue;
      auto& row = h.counts[static_cast<std::size_t>(i)];
      if (row.empty()) row.assign(h.bins, 0.0);
      row[h.bin_of(e.t)] += 1.0;
    }
  return h;
}

int VisitHistory::bin_of(Seconds t) const {
  const Seconds period = bin_seconds * bins;
  const Seconds folded = ((t % period) + period) % period;
  return static_cast<int>(folded / bin_seconds);
}

double VisitHistory::kernel_at(double dt) const {
  const double u = dt / static_cast<double>(bandwidth);
  return kernel == KernelKind::Gaussian ? std::exp(-0.5 * u * u) : std::exp(-std::abs(u));
}

void VisitHistory::save(const std::filesystem::path& path, const PoiIndex& index, const nlohmann::json& meta) const {
  nlohmann::json j;
  if (!meta.is_null()) j["meta"] = meta;
  j["format"] = "synhat-visit-history";
  j["version"] = kVisitHistoryVersion;
  j["bin_seconds"] = bin_seconds;
  j["bins"] = bins;
  j["bandwidth_seconds"] = bandwidth;
  j["radius_bins"] = radius_bins;
  j["kernel"] = kernel == KernelKind::Gaussian ? "gaussian" : "exponential";
  // Sorted by POI id so the artifact is byte-stable.
  std::map<std::string, std::vector<double>> rows;
  for (const auto& [i, row] : counts) rows[index.pois()[i].id] = row;
  j["counts"] = rows;
  write_file_atomic(path, j.dump());
}

VisitHistory VisitHistory::load(const std::filesystem::path& path, const PoiIndex& index) {
  const auto j = nlohmann::json::parse(read_file(path));
  if (j.value("format", "") != "synhat-visit-history") throw std::runtime_error(path.string() + ": not a visit history");
  if (j.at("version").get<int>() != kVisitHistoryVersion)
    throw std::runtime_error(path.string() + ": unsupported visit history version");
  VisitHistory h;
  h.bin_seconds = j.at("bin_seconds").get<Seconds>();
  h.bins = j.at("bins").get<int>();
  h.bandwidth = j.at("bandwidth_seconds").get<Seconds>();
  h.radius_bins = j.at("radius_bins").get<int>();
  h.kernel = j.at("kernel").get<std::string>() == "gaussian" ? KernelKind::Gaussian : KernelKind::Exponential;
  for (const auto& [id, row] : j.at("counts").items()) {
    const long i = index.find(id);
    if (i < 0) throw std::runtime_error(path.string() + ": unknown POI '" + id + "'");
    h.counts[static_cast<std::size_t>(i)] = row.get<std::vector<double>>();
  }
  return h;
}

std::vector<double> temporal_density(const std::vector<std::size_t>& candidates, Seconds t,
                                     const VisitHistory& history) {
  std::vector<double> d(candidates.size(), 0.0);
  const int b = history.bin_of(t);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    auto it = history.counts.find(candidates[c]);
    if (it == history.counts.end()) continue;
    for (int k = -history.radius_bins; k <= history.radius_bins; ++k) {
      const int tau = ((b + k) % history.bins + history.bins) % history.bins;
      const double v = it->second[tau];
      if (v == 0.0) continue;
      d[c] += history.kernel_at(static_cast<double>(k) * history.bin_seconds) * v;
    }
  }
  return d;
}

std::vector<double> activity_probabilities(const std::vector<double>& densities) {
  double total = 0.0;
  for (double d : densities) total += d;
  std::vector<double> p(densities.size(), densities.empty() ? 0.0 : 1.0 / densities.size());
  if (total > 0.0)
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = densities[i] / total;
  return p;
}

std::size_t sample_activity(const std::vector<std::size_t>& candidates, const std::vector<double>& densities,
                            std::mt19937_64& rng) {
  if (candidates.empty()) throw std::invalid_argument("no candidate activities");
  double total = 0.0;
  for (double d : densities) total += d;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (total <= 0.0) {
    const auto k = std::min(static_cast<std::size_t>(u(rng) * candidates.size()), candidates.size() - 1);
    return candidates[k];
  }
  const double target = u(rng) * total;
  double acc = 0.0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    acc += densities[c];
    if (target < acc) return candidates[c];
  }
  for (std::size_t c = candidates.size(); c-- > 0;)
    if (densities[c] > 0.0) return candidates[c];
  return candidates.back();
}

AlignResult align(const FineStates& states, const PoiIndex& index, const VisitHistory& history,
                  const AlignConfig& cfg, std::mt19937_64& rng) {
  AlignResult out;
  for (const FineState& s : states) {
    double r = cfg.radius_m;
    auto cand = index.radius_query(s.coord, r);
    for (int k = 0; cand.empty() && k < cfg.max_doublings; ++k) {
      r *= 2.0;
      cand = index.radius_query(s.coord, r);
    }
    if (cand.empty()) {
      ++out.dropped;
      continue;
    }
    const std::size_t pick = sample_activity(cand, temporal_density(cand, s.t, history), rng);
    const Poi& p = index.pois()[pick];
    out.hat.events.push_back({p.id, p.lat, p.lon, s.t});
    out.radius_used.push_back(r);
  }
  return out;
}

}  // namespace synhat::align
