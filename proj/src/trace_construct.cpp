// SPDX-License-Identifier: Apache-2.0
#include "synhat/trace_construct.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

namespace synhat::trace {

namespace {

Coord lerp(Coord a, Coord b, double w) {
  return {a.lat + (b.lat - a.lat) * w, a.lon + (b.lon - a.lon) * w};
}

int slot_count(Seconds duration, Seconds granularity) {
  if (granularity <= 0 || duration <= 0 || duration % granularity != 0)
    throw std::invalid_argument("granularity " + std::to_string(granularity) + " s does not divide duration " +
                                std::to_string(duration) + " s");
  return static_cast<int>(duration / granularity);
}

}  // namespace

Coord most_frequent_poi(const std::vector<Hat>& corpus) {
  std::map<std::string, std::pair<std::size_t, Coord>> counts;
  for (const Hat& h : corpus)
    for (const Event& e : h.events) {
      auto& slot = counts[e.poi];
      ++slot.first;
      slot.second = e.coord();
    }
  if (counts.empty()) return {};
  auto best = counts.begin();
  for (auto it = counts.begin(); it != counts.end(); ++it)
    if (it->second.first > best->second.first) best = it;
  return best->second.second;
}

Coord mean_coordinate(const std::vector<Hat>& corpus) {
  double lat = 0.0, lon = 0.0;
  std::size_t n = 0;
  for (const Hat& h : corpus)
    for (const Event& e : h.events) {
      lat += e.lat;
      lon += e.lon;
      ++n;
    }
  if (n == 0) return {};
  return {lat / static_cast<double>(n), lon / static_cast<double>(n)};
}

LatentSTTrace build_coarse_trace(const Hat& h, Seconds granularity, Coord dummy) {
  CoarseOptions opts;
  opts.dummy = dummy;
  return build_coarse_trace(h, granularity, opts);
}

LatentSTTrace build_coarse_trace(const Hat& h, Seconds granularity, const CoarseOptions& opts) {
  if (h.events.empty()) throw std::invalid_argument("cannot bin an empty trace");
  const int L = slot_count(h.duration, granularity);

  std::vector<Coord> sum(L);
  std::vector<int> count(L, 0);
  for (const Event& e : h.events) {
    if (e.t < 0 || e.t >= h.duration) continue;
    const auto i = static_cast<std::size_t>(e.t / granularity);
    sum[i].lat += e.lat;
    sum[i].lon += e.lon;
    ++count[i];
  }

  LatentSTTrace out;
  out.granularity = granularity;
  out.coords.assign(L, opts.dummy);
  out.mask.assign(L, 0.0);
  std::vector<int> filled;
  for (int i = 0; i < L; ++i) {
    if (count[i] == 0) continue;
    out.coords[i] = {sum[i].lat / count[i], sum[i].lon / count[i]};
    filled.push_back(i);
  }
  if (filled.empty()) throw std::invalid_argument("trace has no events inside its window");

  for (std::size_t k = 0; k < filled.size(); ++k) {
    const int a = filled[k];
    const int b = k + 1 < filled.size() ? filled[k + 1] : L;
    for (int i = a + 1; i < b; ++i) {
      if (b == L) {
        out.coords[i] = opts.fill == CoordFill::CityMean ? opts.city_mean : out.coords[a];
        continue;
      }
      switch (opts.fill) {
        case CoordFill::Interpolate:
          out.coords[i] = lerp(out.coords[a], out.coords[b], static_cast<double>(i - a) / (b - a));
          break;
        case CoordFill::Replicate:
          out.coords[i] = out.coords[i - 1];
          break;
        case CoordFill::CityMean:
          out.coords[i] = opts.city_mean;
          break;
      }
    }
  }

  double bit = 0.0;
  for (int i = 0; i < L; ++i) {
    const bool event = count[i] > 0;
    if (opts.mask == MaskScheme::Indicator) {
      out.mask[i] = event ? 1.0 : 0.0;
    } else {
      if (event) bit = 1.0 - bit;
      out.mask[i] = bit;
    }
  }
  return out;
}

LatentSTStates compress_to_states(const LatentSTTrace& t, double threshold) {
  LatentSTStates out;
  for (std::size_t i = 0; i < t.mask.size(); ++i)
    if (t.mask[i] >= threshold) out.push_back({t.coords[i], static_cast<int>(i)});
  return out;
}

std::vector<int> toggle_event_slots(const std::vector<double>& mask) {
  std::vector<int> out;
  bool prev = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool bit = mask[i] >= 0.5;
    if (bit != prev) out.push_back(static_cast<int>(i));
    prev = bit;
  }
  return out;
}

FineSegment build_fine_segment(const Hat& h, const LatentSTTrace& coarse, int slot) {
  const Seconds G = coarse.granularity;
  if (G <= 0 || G % kFineUnit != 0)
    throw std::invalid_argument("granularity must be a positive multiple of the fine unit");
  const int L = static_cast<int>(coarse.length());
  if (slot < 0 || slot >= L) throw std::out_of_range("slot index out of range");
  const int cells = static_cast<int>(G / kFineUnit);
  const Seconds start = slot * G;

  std::vector<Coord> sum(cells);
  std::vector<int> count(cells, 0);
  for (const Event& e : h.events) {
    if (e.t < start || e.t >= start + G) continue;
    const auto k = static_cast<std::size_t>((e.t - start) / kFineUnit);
    sum[k].lat += e.lat;
    sum[k].lon += e.lon;
    ++count[k];
  }
  if (std::all_of(count.begin(), count.end(), [](int c) { return c == 0; }))
    throw std::invalid_argument("slot " + std::to_string(slot) + " is inactive");

  // Anchors as (seconds, coordinate), increasing in time.
  const Coord own = coarse.coords[slot];
  std::vector<std::pair<double, Coord>> anchors;
  anchors.emplace_back(start - 0.5 * G, slot > 0 ? coarse.coords[slot - 1] : own);
  FineSegment seg;
  seg.slot = slot;
  seg.mask.assign(cells, 0.0);
  for (int k = 0; k < cells; ++k) {
    if (count[k] == 0) continue;
    anchors.emplace_back(static_cast<double>(start + k * kFineUnit),
                         Coord{sum[k].lat / count[k], sum[k].lon / count[k]});
    seg.mask[k] = 1.0;
  }
  anchors.emplace_back(start + 1.5 * G, slot + 1 < L ? coarse.coords[slot + 1] : own);

  seg.coords.resize(cells);
  std::size_t j = 0;
  for (int k = 0; k < cells; ++k) {
    const double t = static_cast<double>(start + k * kFineUnit);
    while (j + 2 < anchors.size() && anchors[j + 1].first <= t) ++j;
    const auto& [t0, c0] = anchors[j];
    const auto& [t1, c1] = anchors[j + 1];
    seg.coords[k] = t1 > t0 ? lerp(c0, c1, (t - t0) / (t1 - t0)) : c1;
  }
  return seg;
}

FineStates states_to_hat_skeleton(const std::vector<FineCell>& cells, Seconds granularity) {
  FineStates out;
  out.reserve(cells.size());
  for (const FineCell& c : cells) {
    const Seconds t = c.slot * granularity + c.cell * kFineUnit;
    // Cells come from disjoint slots in slot order, so time never goes back.
    if (!out.empty() && t < out.back().t) throw std::logic_error("fine cells are not in time order");
    out.push_back({c.coord, t});
  }
  return out;
}

std::vector<FineCell> fine_cells(const FineSegment& seg, double threshold) {
  std::vector<FineCell> out;
  for (std::size_t k = 0; k < seg.mask.size(); ++k)
    if (seg.mask[k] >= threshold) out.push_back({seg.coords[k], seg.slot, static_cast<int>(k)});
  return out;
}

Normalizer Normalizer::fit(const std::vector<Hat>& corpus) {
  Normalizer n;
  n.mean = mean_coordinate(corpus);
  double vlat = 0.0, vlon = 0.0;
  std::size_t count = 0;
  for (const Hat& h : corpus)
    for (const Event& e : h.events) {
      vlat += (e.lat - n.mean.lat) * (e.lat - n.mean.lat);
      vlon += (e.lon - n.mean.lon) * (e.lon - n.mean.lon);
      ++count;
    }
  if (count > 0) {
    const double slat = std::sqrt(vlat / count), slon = std::sqrt(vlon / count);
    n.stddev = {slat > 1e-12 ? slat : 1.0, slon > 1e-12 ? slon : 1.0};
  }
  return n;
}

Coord Normalizer::forward(Coord c) const {
  return {(c.lat - mean.lat) / stddev.lat, (c.lon - mean.lon) / stddev.lon};
}

Coord Normalizer::inverse(Coord c) const {
  return {c.lat * stddev.lat + mean.lat, c.lon * stddev.lon + mean.lon};
}

std::vector<int> turning_points(const std::vector<Coord>& path, double theta_threshold) {
  std::vector<int> out;
  for (std::size_t i = 1; i + 1 < path.size(); ++i) {
    // Local equirectangular frame so lat and lon steps are comparable.
    const double k = std::cos(path[i].lat * M_PI / 180.0);
    const double ux = (path[i - 1].lon - path[i].lon) * k, uy = path[i - 1].lat - path[i].lat;
    const double vx = (path[i].lon - path[i + 1].lon) * k, vy = path[i].lat - path[i + 1].lat;
    const double nu = std::hypot(ux, uy), nv = std::hypot(vx, vy);
    if (nu < 1e-12 || nv < 1e-12) continue;
    const double c = std::clamp((ux * vx + uy * vy) / (nu * nv), -1.0, 1.0);
    if (std::acos(c) > theta_threshold) out.push_back(static_cast<int>(i));
  }
  return out;
}

void write_coarse_csv(std::ostream& out, const LatentSTTrace& t) {
  out << "slot,lat,lon,mask\n";
  out.precision(10);
  for (std::size_t i = 0; i < t.length(); ++i)
    out << i << ',' << t.coords[i].lat << ',' << t.coords[i].lon << ',' << t.mask[i] << '\n';
}

}  // namespace synhat::trace
