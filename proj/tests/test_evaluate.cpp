// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "synhat/evaluate.hpp"

using namespace synhat;
using namespace synhat::eval;

namespace {

// Meters per degree of latitude on the sphere used by haversine_m.
constexpr double kMetersPerDeg = 6371008.8 * M_PI / 180.0;

Hat make_hat(std::vector<std::pair<Coord, Seconds>> pts, Seconds duration = 86400) {
  Hat h;
  h.trace_id = "h";
  h.duration = duration;
  for (auto& [c, t] : pts) h.events.push_back({"p", c.lat, c.lon, t});
  return h;
}

Hat random_hat(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> lat(40.70, 40.74), lon(-74.02, -73.98);
  std::uniform_int_distribution<Seconds> t(0, 86400 - 1);
  std::vector<Seconds> ts(n);
  for (auto& x : ts) x = t(rng);
  std::sort(ts.begin(), ts.end());
  std::vector<std::pair<Coord, Seconds>> pts;
  for (Seconds x : ts) pts.push_back({{lat(rng), lon(rng)}, x});
  return make_hat(pts);
}

// Exhaustive maximum matching for small traces.
int brute_matching(const std::vector<std::vector<bool>>& ok, std::size_t i, std::vector<bool>& used) {
  if (i == ok.size()) return 0;
  int best = brute_matching(ok, i + 1, used);
  for (std::size_t j = 0; j < used.size(); ++j) {
    if (!ok[i][j] || used[j]) continue;
    used[j] = true;
    best = std::max(best, 1 + brute_matching(ok, i + 1, used));
    used[j] = false;
  }
  return best;
}

}  // namespace

TEST_CASE("haversine agrees with meridian arc length") {
  CHECK(haversine_m({10.0, 20.0}, {11.0, 20.0}) == doctest::Approx(kMetersPerDeg).epsilon(1e-12));
  CHECK(haversine_m({0.0, 0.0}, {0.0, 0.0}) == 0.0);
}

TEST_CASE("trace statistics") {
  SUBCASE("single event") {
    const auto s = trace_statistics(make_hat({{{40.0, -74.0}, 10}}));
    CHECK(s.distances.empty());
    CHECK(s.intervals.empty());
    CHECK(s.radius == 0.0);
    CHECK(s.length == 1);
  }
  SUBCASE("two events 1 km and 600 s apart") {
    const double dlat = 1000.0 / kMetersPerDeg;
    const auto s = trace_statistics(make_hat({{{0.0, 30.0}, 0}, {{dlat, 30.0}, 600}}));
    REQUIRE(s.distances.size() == 1);
    CHECK(s.distances[0] == doctest::Approx(1000.0).epsilon(1e-9));
    CHECK(s.intervals == std::vector<double>{600.0});
    CHECK(s.radius == doctest::Approx(500.0).epsilon(1e-9));
  }
  SUBCASE("colocated") {
    const auto s = trace_statistics(make_hat({{{1.0, 2.0}, 0}, {{1.0, 2.0}, 5}, {{1.0, 2.0}, 9}}));
    CHECK(s.radius == doctest::Approx(0.0));
    for (double d : s.distances) CHECK(d == 0.0);
  }
  SUBCASE("length identities") {
    std::mt19937_64 rng(3);
    for (int n = 1; n < 20; ++n) {
      const auto s = trace_statistics(random_hat(rng, n));
      CHECK(s.length == n);
      CHECK(s.distances.size() == static_cast<std::size_t>(n - 1));
      CHECK(s.intervals.size() == static_cast<std::size_t>(n - 1));
    }
  }
}

TEST_CASE("histogram probabilities sum to one") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(1000);
  for (double& x : v) x = nd(rng);
  const auto h = histogram(Metric::Distance, v, *std::min_element(v.begin(), v.end()),
                           *std::max_element(v.begin(), v.end()));
  CHECK(h.edges.size() == 51);
  double total = 0.0;
  for (double p : h.probabilities) {
    CHECK(p >= 0.0);
    total += p;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("jsd") {
  SUBCASE("identical") {
    const auto p = histogram(Metric::Length, {1, 2, 2, 3, 5}, 0, 10, 10);
    CHECK(jsd(p, p) == 0.0);
  }
  SUBCASE("disjoint point masses") {
    const auto p = histogram(Metric::Length, {1, 1}, 0, 10, 10);
    const auto q = histogram(Metric::Length, {9}, 0, 10, 10);
    CHECK(jsd(p, q) == doctest::Approx(1.0).epsilon(1e-8));
  }
  SUBCASE("matches elementwise KL oracle") {
    MetricHistogram p{Metric::Radius, {0, 1, 2, 3}, {0.2, 0.5, 0.3}};
    MetricHistogram q{Metric::Radius, {0, 1, 2, 3}, {0.6, 0.1, 0.3}};
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double a = p.probabilities[i], b = q.probabilities[i], m = (a + b) / 2;
      expect += 0.5 * a * std::log(a / m) / std::log(2.0) + 0.5 * b * std::log(b / m) / std::log(2.0);
    }
    CHECK(jsd(p, q) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("symmetric and bounded on random pairs") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0, 1);
    for (int k = 0; k < 200; ++k) {
      std::vector<double> a(30), b(30);
      for (auto& x : a) x = u(rng) * u(rng) * 10;
      for (auto& x : b) x = u(rng) * 10;
      const auto p = histogram(Metric::Interval, a, 0, 10, 50), q = histogram(Metric::Interval, b, 0, 10, 50);
      CHECK(jsd(p, q) == jsd(q, p));
      CHECK(jsd(p, q) >= 0.0);
      CHECK(jsd(p, q) <= 1.0);
    }
  }
  SUBCASE("edge mismatch throws") {
    const auto p = histogram(Metric::Length, {1}, 0, 10, 10), q = histogram(Metric::Length, {1}, 0, 11, 10);
    CHECK_THROWS_AS(jsd(p, q), std::invalid_argument);
  }
}

TEST_CASE("fidelity report") {
  std::mt19937_64 rng(11);
  std::vector<Hat> real;
  for (int i = 0; i < 50; ++i) real.push_back(random_hat(rng, 3 + i % 7));
  SUBCASE("self comparison") {
    const auto r = fidelity_report(real, real);
    for (double j : r.jsd) CHECK(j <= 1e-6);
    CHECK(r.average <= 1e-6);
    for (const auto& c : r.cdf) {
      CHECK(c.x.size() == 50);
      CHECK(c.real.back() == doctest::Approx(1.0));
    }
  }
  SUBCASE("shuffle invariance") {
    std::vector<Hat> synth;
    for (int i = 0; i < 40; ++i) synth.push_back(random_hat(rng, 2 + i % 4));
    auto shuffled = synth;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto a = fidelity_report(real, synth), b = fidelity_report(real, shuffled);
    for (int k = 0; k < 4; ++k) CHECK(a.jsd[k] == b.jsd[k]);
    CHECK(a.average == doctest::Approx((a.jsd[0] + a.jsd[1] + a.jsd[2] + a.jsd[3]) / 4));
    CHECK(a.average > 0.0);
  }
  SUBCASE("exports") {
    const auto r = fidelity_report(real, real);
    const auto j = r.to_json();
    CHECK(j.contains("distance"));
    CHECK(j.contains("average"));
    CHECK(j["cdf"]["length"]["x"].size() == 50);
    std::ostringstream csv, cdf;
    r.write_csv(csv);
    r.write_cdf_csv(cdf);
    CHECK(csv.str().rfind("metric,jsd\n", 0) == 0);
    const std::string text = cdf.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 4 * 50);
  }
  CHECK_THROWS(fidelity_report({}, real));
}

TEST_CASE("similarity") {
  PrivacyConfig cfg{200.0, 1800.0, 1500};
  std::mt19937_64 rng(13);
  SUBCASE("identity and disjointness") {
    const Hat a = random_hat(rng, 8);
    CHECK(similarity(a, a, cfg) == 1.0);
    Hat far = a;
    for (auto& e : far.events) e.lat += 1.0;
    CHECK(similarity(a, far, cfg) == 0.0);
  }
  SUBCASE("hand case N1=3 N2=2 matching of one") {
    // All three events of a sit near b's first event; b's second event is far away.
    const double d = 50.0 / kMetersPerDeg;
    const Hat a = make_hat({{{0.0, 0.0}, 0}, {{d, 0.0}, 60}, {{-d, 0.0}, 120}});
    const Hat b = make_hat({{{0.0, 0.0}, 30}, {{1.0, 0.0}, 60}});
    CHECK(matched_events(a, b, cfg) == 1);
    CHECK(similarity(a, b, cfg) == doctest::Approx(0.25));
  }
  SUBCASE("matches exhaustive oracle and is symmetric") {
    PrivacyConfig loose{2000.0, 7200.0, 1500};
    for (int k = 0; k < 100; ++k) {
      const Hat a = random_hat(rng, 1 + k % 6), b = random_hat(rng, 1 + (k * 7) % 5);
      std::vector<std::vector<bool>> ok(a.events.size(), std::vector<bool>(b.events.size()));
      for (std::size_t i = 0; i < a.events.size(); ++i)
        for (std::size_t j = 0; j < b.events.size(); ++j)
          ok[i][j] = std::abs(static_cast<double>(a.events[i].t - b.events[j].t)) <= loose.tr_t &&
                     haversine_m(a.events[i].coord(), b.events[j].coord()) <= loose.tr_s;
      std::vector<bool> used(b.events.size(), false);
      CHECK(matched_events(a, b, loose) == brute_matching(ok, 0, used));
      CHECK(similarity(a, b, loose) == similarity(b, a, loose));
    }
  }
  SUBCASE("monotone in both tolerances") {
    PrivacyConfig tight{200.0, 1800.0, 1500}, mid_s{2000.0, 1800.0, 1500}, mid_t{200.0, 7200.0, 1500},
        loose{2000.0, 7200.0, 1500};
    for (int k = 0; k < 100; ++k) {
      const Hat a = random_hat(rng, 10), b = random_hat(rng, 12);
      const double s0 = similarity(a, b, tight);
      CHECK(similarity(a, b, mid_s) >= s0);
      CHECK(similarity(a, b, mid_t) >= s0);
      CHECK(similarity(a, b, loose) >= similarity(a, b, mid_s));
      CHECK(similarity(a, b, loose) >= similarity(a, b, mid_t));
    }
  }
}

TEST_CASE("percentile") {
  CHECK(percentile({1, 2, 3, 4, 5}, 50) == 3.0);
  CHECK(percentile({0, 10}, 95) == doctest::Approx(9.5));
  CHECK(percentile({7}, 95) == 7.0);
  CHECK_THROWS(percentile({}, 50));
}

TEST_CASE("privacy report") {
  std::mt19937_64 rng(17);
  std::vector<Hat> train;
  for (int i = 0; i < 60; ++i) train.push_back(random_hat(rng, 4 + i % 5));
  PrivacyConfig cfg{200.0, 1800.0, 1500};
  SUBCASE("memorized copies") {
    const auto r = privacy_report(train, train, cfg, rng);
    CHECK(r.max_similarity.size() == train.size());
    for (double s : r.max_similarity) CHECK(s == 1.0);
    CHECK(r.p95 == 1.0);
  }
  SUBCASE("spatially disjoint") {
    auto far = train;
    for (auto& h : far)
      for (auto& e : h.events) e.lon += 2.0;
    const auto r = privacy_report(far, train, cfg, rng);
    for (double s : r.max_similarity) CHECK(s == 0.0);
  }
  SUBCASE("sample count and p95 recomputation") {
    std::vector<Hat> synth;
    for (int i = 0; i < 80; ++i) synth.push_back(random_hat(rng, 6));
    PrivacyConfig small = cfg;
    small.sample_count = 25;
    const auto r = privacy_report(synth, train, small, rng);
    CHECK(r.max_similarity.size() == 25);
    auto v = r.max_similarity;
    std::sort(v.begin(), v.end());
    const double rank = 0.95 * (v.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    CHECK(r.p95 == doctest::Approx(v[lo] + (rank - lo) * (v[lo + 1] - v[lo])));
    CHECK(r.cdf_y.back() == 1.0);
    CHECK(std::is_sorted(r.cdf_x.begin(), r.cdf_x.end()));
    const auto j = r.to_json(small);
    CHECK(j["count"] == 25);
  }
  SUBCASE("pruned max equals exhaustive max") {
    PrivacyConfig loose{2000.0, 7200.0, 1500};
    std::vector<Hat> synth;
    for (int i = 0; i < 20; ++i) synth.push_back(random_hat(rng, 5));
    std::mt19937_64 r1(1);
    const auto r = privacy_report(synth, train, loose, r1);
    std::vector<double> expect;
    for (const Hat& s : synth) {
      double best = 0.0;
      for (const Hat& t : train) best = std::max(best, similarity(s, t, loose));
      expect.push_back(best);
    }
    auto got = r.max_similarity;
    std::sort(got.begin(), got.end());
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);
  }
}
