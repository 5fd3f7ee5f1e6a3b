// SPDX-License-Identifier: Apache-2.0
#include "synhat/toy_city.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace synhat::toy {

namespace {

constexpr double kLat0 = 40.70;
constexpr double kLon0 = -74.00;

int grid_id(int r, int c) { return r * kGridSide + c; }

int random_neighbour(int id, std::mt19937_64& rng) {
  const int r = id / kGridSide, c = id % kGridSide;
  std::vector<int> out;
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc) {
      const int rr = r + dr, cc = c + dc;
      if ((dr || dc) && rr >= 0 && rr < kGridSide && cc >= 0 && cc < kGridSide) out.push_back(grid_id(rr, cc));
    }
  return out[std::uniform_int_distribution<std::size_t>(0, out.size() - 1)(rng)];
}

double dist_m(const Poi& a, const Poi& b) {
  const double dy = (a.lat - b.lat) * 111195.0;
  const double dx = (a.lon - b.lon) * 111195.0 * std::cos(a.lat * M_PI / 180.0);
  return std::hypot(dx, dy);
}

}  // namespace

ToyCity make_toy_city(std::uint64_t seed, int traces) {
  ToyCity city;
  for (int r = 0; r < kGridSide; ++r)
    for (int c = 0; c < kGridSide; ++c)
      city.pois.push_back({"poi" + std::to_string(grid_id(r, c)), kLat0 + r * kGridStepLat, kLon0 + c * kGridStepLon});

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> any_poi(0, kGridSide * kGridSide - 1);
  std::uniform_int_distribution<int> minute(0, 59);
  std::bernoulli_distribution coin(0.5);
  for (int u = 0; u < traces; ++u) {
    const int home = any_poi(rng);
    int work = any_poi(rng);
    while (work == home) work = any_poi(rng);
    const int lunch = random_neighbour(work, rng);
    const int gym = random_neighbour(home, rng);
    int leisure = any_poi(rng);
    while (leisure == home) leisure = any_poi(rng);
    const bool gym_goer = std::bernoulli_distribution(0.4)(rng);
    const int home_hour = gym_goer ? 20 : 19;

    Hat h;
    h.trace_id = "toy" + std::to_string(u);
    h.duration = city.duration;
    auto visit = [&](int day, int hour, int min, int poi) {
      const Poi& p = city.pois[poi];
      h.events.push_back({p.id, p.lat, p.lon, static_cast<Seconds>(day) * 86400 + hour * 3600 + min * 60});
    };
    for (int day = 0; day < 7; ++day) {
      if (day < 5) {
        visit(day, 7, minute(rng), home);
        if (std::bernoulli_distribution(0.1)(rng)) {
          visit(day, home_hour, minute(rng), home);
          continue;
        }
        if (gym_goer) {
          visit(day, 9, std::uniform_int_distribution<int>(0, 20)(rng), work);
          visit(day, 9, std::uniform_int_distribution<int>(35, 55)(rng), work);
        } else {
          visit(day, 9, minute(rng), work);
        }
        if (coin(rng)) {
          visit(day, 12, minute(rng), lunch);
          visit(day, 13, minute(rng), work);
        }
        if (gym_goer && (day == 1 || day == 3)) visit(day, 18, minute(rng), gym);
        visit(day, home_hour, minute(rng), home);
      } else {
        visit(day, 10, minute(rng), home);
        if (std::bernoulli_distribution(0.7)(rng)) visit(day, 14, minute(rng), leisure);
        visit(day, 21, minute(rng), home);
      }
    }
    city.traces.push_back(std::move(h));
  }
  return city;
}

std::vector<Hat> random_walk_baseline(const std::vector<Poi>& pois, const std::vector<Hat>& corpus, int count,
                                      std::uint64_t seed, double step_m) {
  if (pois.empty() || corpus.empty()) throw std::invalid_argument("random walk needs POIs and a corpus");
  double mean_len = 0.0;
  for (const Hat& h : corpus) mean_len += static_cast<double>(h.events.size()) / corpus.size();
  const Seconds duration = corpus.front().duration;
  const Seconds minutes = duration / kFineUnit;

  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> length(mean_len);
  std::uniform_int_distribution<Seconds> minute(0, minutes - 1);
  std::uniform_int_distribution<std::size_t> any_poi(0, pois.size() - 1);
  std::vector<Hat> out;
  for (int k = 0; k < count; ++k) {
    const int n = std::max(1, length(rng));
    std::vector<Seconds> ts(n);
    for (auto& t : ts) t = minute(rng) * kFineUnit;
    std::sort(ts.begin(), ts.end());
    Hat h;
    h.trace_id = "rw" + std::to_string(k);
    h.duration = duration;
    std::size_t at = any_poi(rng);
    for (Seconds t : ts) {
      h.events.push_back({pois[at].id, pois[at].lat, pois[at].lon, t});
      std::vector<std::size_t> near;
      for (std::size_t j = 0; j < pois.size(); ++j)
        if (j != at && dist_m(pois[at], pois[j]) <= step_m) near.push_back(j);
      if (!near.empty()) at = near[std::uniform_int_distribution<std::size_t>(0, near.size() - 1)(rng)];
    }
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace synhat::toy
