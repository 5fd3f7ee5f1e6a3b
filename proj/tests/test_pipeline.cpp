// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "synhat/pipeline.hpp"
#include "synhat/toy_city.hpp"

using namespace synhat;
using namespace synhat::pipeline;

namespace {

PipelineConfig tiny_config(std::uint64_t seed = 1) {
  PipelineConfig c = PipelineConfig::toy();
  c.seed = seed;
  c.coarse_net.base_channels = 4;
  c.coarse_net.channel_multipliers = {1, 2};
  c.coarse_net.embedding_dim = 8;
  c.fine_net.base_channels = 4;
  c.fine_net.channel_multipliers = {1, 2};
  c.fine_net.embedding_dim = 8;
  c.fine_net.film_hidden = 8;
  c.bpem.dim = 8;
  c.bpem.heads = 2;
  c.coarse_train.batch_size = 4;
  c.fine_train.batch_size = 32;
  c.sampler.ddim_steps = 5;
  return c;
}

std::vector<Hat> toy_traces(int n) {
  auto city = toy::make_toy_city(7, n);
  return city.traces;
}

// One day of hourly events tracing a sinusoid in longitude.
std::vector<Hat> sinusoid_corpus(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 0.5);
  std::vector<Hat> out;
  for (int k = 0; k < n; ++k) {
    Hat h;
    h.trace_id = "s" + std::to_string(k);
    h.duration = 86400;
    const double ph = phase(rng);
    for (int s = 0; s < 24; ++s)
      h.events.push_back({"p", 40.0 + 0.01 * s / 24.0, -74.0 + 0.02 * std::sin(2 * M_PI * s / 24.0 + ph),
                          static_cast<Seconds>(s) * 3600 + 600});
    out.push_back(std::move(h));
  }
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("synhat_pipeline_" + name);
}

}  // namespace

TEST_CASE("derived seeds are distinct and stable") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 50; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seen.insert(derive_seed(9, a, b));
  CHECK(seen.size() == 2500);
  CHECK(derive_seed(9, 3, 4) == derive_seed(9, 3, 4));
  CHECK(derive_seed(9, 3, 4) != derive_seed(10, 3, 4));
}

TEST_CASE("config") {
  SUBCASE("granularity must divide duration") {
    PipelineConfig c = tiny_config();
    c.granularity = 7 * 60;
    c.duration = 86400 + 60;
    try {
      c.validate();
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("420") != std::string::npos);
      CHECK(msg.find("86460") != std::string::npos);
    }
  }
  SUBCASE("flat file") {
    const auto f = FlatConfig::parse(
        "seed = 5\n[data]\ngranularity_minutes = 120\nduration_days = 14\n[coarse]\nchannel_multipliers = [1, 2]\n"
        "epochs = 3\n[sampler]\nddim_steps = 10\n[pipeline]\nuse_context = false\n");
    const auto c = PipelineConfig::from_flat(f);
    CHECK(c.granularity == 7200);
    CHECK(c.duration == 14 * 86400);
    CHECK(c.slots() == 168);
    CHECK(c.fine_cells() == 120);
    CHECK(c.coarse_net.channel_multipliers == std::vector<int>{1, 2});
    CHECK(c.coarse_train.epochs == 3);
    CHECK(c.sampler.ddim_steps == 10);
    CHECK_FALSE(c.use_context);
    CHECK(c.seed == 5);
    CHECK(c.perturb.sigma_t == doctest::Approx(720.0));
    CHECK_THROWS_AS(PipelineConfig::from_flat(FlatConfig::parse("[data]\ngranularity_minutes = 11\n")), ConfigError);
  }
  SUBCASE("json round trip") {
    PipelineConfig c = tiny_config(77);
    c.perturb.p_end = 0.4;
    c.use_context = false;
    const auto j = c.to_json();
    CHECK(PipelineConfig::from_json(j).to_json() == j);
  }
  SUBCASE("derived network shapes") {
    const PipelineConfig c = tiny_config();
    CHECK(c.coarse_unet().in_channels == 3);
    CHECK(c.fine_unet().in_channels == 6);
    CHECK(c.fine_unet().out_channels == 3);
    CHECK(c.fine_unet().conditional);
    CHECK(c.fine_unet().context_dim == 2 * c.bpem.dim);
  }
}

TEST_CASE("perturbation schedule ramps up then holds") {
  PerturbConfig p;
  CHECK(p.p_at(0.0) == doctest::Approx(0.05));
  CHECK(p.p_at(0.25) == doctest::Approx(0.175));
  CHECK(p.p_at(0.5) == doctest::Approx(0.30));
  CHECK(p.p_at(0.9) == doctest::Approx(0.30));
  double prev = 0.0;
  for (int i = 0; i <= 100; ++i) {
    CHECK(p.p_at(i / 100.0) >= prev);
    prev = p.p_at(i / 100.0);
  }
}

TEST_CASE("coarse encoding round trip") {
  const auto corpus = toy_traces(4);
  const auto norm = trace::Normalizer::fit(corpus);
  const auto t = trace::build_coarse_trace(corpus[0], 3600, trace::most_frequent_poi(corpus));
  const auto x = encode_coarse(t, norm);
  const auto back = decode_coarse(x, static_cast<int>(t.length()), 3600, norm);
  for (std::size_t i = 0; i < t.length(); ++i) {
    CHECK(back.coords[i].lat == doctest::Approx(t.coords[i].lat).epsilon(1e-12));
    CHECK(back.coords[i].lon == doctest::Approx(t.coords[i].lon).epsilon(1e-12));
    CHECK(back.mask[i] == t.mask[i]);
    CHECK(x[2 * t.length() + i] == 2.0 * t.mask[i] - 1.0);
  }
  CHECK(slot_time(0, 3600, 7 * 86400) == doctest::Approx(2.0 * 0.5 / 168 - 1.0));
  CHECK(slot_time(167, 3600, 7 * 86400) == doctest::Approx(1.0 - 1.0 / 168));
}

TEST_CASE("stage 1 smoke, checkpoint and resume") {
  const auto corpus = toy_traces(8);
  const PipelineConfig cfg = tiny_config(3);

  CoarseModel a(cfg);
  a.prepare(corpus);
  const double l0 = a.train_epoch(0);
  CHECK(std::isfinite(l0));
  const auto path = temp_path("s1.ck");
  save_stage(path, a.checkpoint(), cfg, "coarse");
  const auto ck = diffusion::load_checkpoint(path);
  CHECK(ck.meta["stage"] == "coarse");
  CHECK(ck.meta["seed"] == 3);
  CHECK(ck.meta["config_hash"] == hex64(fnv1a64(cfg.to_json().dump())));

  CoarseModel b(cfg);
  b.prepare(corpus);
  b.restore(ck);
  CHECK(b.epochs_done() == 1);
  const double la = a.train_epoch(1);
  const double lb = b.train_epoch(1);
  CHECK(la == lb);
  CHECK(a.generate(2, 11).size() == 2);

  std::filesystem::remove(path);
}

TEST_CASE("stage 1 generation contract") {
  const auto corpus = toy_traces(8);
  CoarseModel m(tiny_config(4));
  m.prepare(corpus);
  m.train_epoch(0);
  CHECK(m.generate(0, 1).empty());
  const auto a = m.generate(3, 21), b = m.generate(3, 21);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].length() == 168);
    CHECK(a[i].mask.size() == 168);
    CHECK(a[i].coords == b[i].coords);
    CHECK(a[i].mask == b[i].mask);
    CHECK_FALSE(trace::compress_to_states(a[i], 0.5).empty());
  }
  const auto c = m.generate(3, 22);
  CHECK(c[0].coords != a[0].coords);
}

TEST_CASE("stage 1 non-finite loss aborts") {
  auto corpus = toy_traces(4);
  corpus[1].events[0].lat = std::nan("");
  CoarseModel m(tiny_config());
  m.prepare(corpus);
  CHECK_THROWS_AS(m.train_epoch(0), TrainingDiverged);
}

TEST_CASE("stage 1 training reduces loss on a sinusoid corpus") {
  std::vector<double> ratios;
  for (std::uint64_t seed : {1, 2, 3}) {
    PipelineConfig cfg = tiny_config(seed);
    cfg.duration = 86400;
    cfg.coarse_train.epochs = 200;
    cfg.coarse_train.batch_size = 8;
    cfg.coarse_train.optim.lr = 2e-3;
    CoarseModel m(cfg);
    m.prepare(sinusoid_corpus(8, seed));
    const double first = m.train_epoch(0);
    (void)first;
    const double before = m.evaluate_loss(99);
    for (int e = 1; e < 200; ++e) m.train_epoch(e);
    const double after = m.evaluate_loss(99);
    ratios.push_back(after / before);
  }
  std::sort(ratios.begin(), ratios.end());
  MESSAGE("median loss ratio after/before: " << ratios[1]);
  CHECK(ratios[1] < 1.0);
}

TEST_CASE("stage 2 perturbation contracts") {
  const auto corpus = toy_traces(8);
  const auto norm = trace::Normalizer::fit(corpus);

  SUBCASE("p = 0 leaves conditions and targets untouched") {
    FineModel m(tiny_config(5), norm);
    m.prepare(corpus);
    m.fixed_perturb_p = 0.0;
    int batches = 0;
    m.observer = [&](const FineStepRecord& r) {
      ++batches;
      CHECK(r.conditions_used == r.conditions);
      CHECK(r.targets_used == r.targets);
      CHECK(std::count(r.perturbed.begin(), r.perturbed.end(), 1) == 0);
    };
    m.train_epoch(0);
    CHECK(batches > 0);
  }
  SUBCASE("p = 1 with zero sigmas matches p = 0") {
    PipelineConfig cfg = tiny_config(5);
    cfg.perturb.sigma_s = 0.0;
    cfg.perturb.sigma_t = 0.0;
    FineModel a(cfg, norm), b(cfg, norm);
    a.prepare(corpus);
    b.prepare(corpus);
    a.fixed_perturb_p = 0.0;
    b.fixed_perturb_p = 1.0;
    CHECK(a.train_epoch(0) == b.train_epoch(0));
    CHECK(a.train_epoch(1) == b.train_epoch(1));
    CHECK(b.perturb_stats().perturbed == b.perturb_stats().decisions);
  }
  SUBCASE("empirical rate and target isolation at p = 0.3") {
    FineModel m(tiny_config(6), norm);
    m.prepare(corpus);
    m.fixed_perturb_p = 0.3;
    const int W = 60;
    long long changed = 0, flagged = 0;
    m.observer = [&](const FineStepRecord& r) {
      CHECK(r.targets_used == r.targets);
      for (std::size_t s = 0; s < r.perturbed.size(); ++s) {
        bool differs = false;
        for (int i = 0; i < 3 * W; ++i)
          differs |= r.conditions_used[s * 3 * W + i] != r.conditions[s * 3 * W + i];
        changed += differs;
        flagged += r.perturbed[s];
      }
    };
    int epoch = 0;
    while (m.perturb_stats().decisions < 10000) m.train_epoch(epoch++);
    const double rate =
        static_cast<double>(m.perturb_stats().perturbed) / static_cast<double>(m.perturb_stats().decisions);
    MESSAGE("perturbation rate " << rate << " over " << m.perturb_stats().decisions << " segments");
    CHECK(rate == doctest::Approx(0.30).epsilon(0.05));
    CHECK(std::abs(rate - 0.30) <= 0.015);
    CHECK(changed == flagged);
  }
}

TEST_CASE("stage 2 generation contracts") {
  const auto corpus = toy_traces(8);
  const PipelineConfig cfg = tiny_config(8);
  CoarseModel coarse(cfg);
  coarse.prepare(corpus);
  FineModel fine(cfg, coarse.normalizer());
  fine.prepare(corpus);
  fine.train_epoch(0);

  const LatentSTTrace real = trace::build_coarse_trace(corpus[0], 3600, coarse.dummy());

  SUBCASE("no active slot gives no states") {
    LatentSTTrace empty = real;
    std::fill(empty.mask.begin(), empty.mask.end(), 0.0);
    CHECK(fine.generate(empty, 1).empty());
  }
  SUBCASE("context extracted once per trace") {
    const long long before = fine.context_extractions();
    fine.generate(real, 3);
    CHECK(fine.context_extractions() == before + 1);
  }
  SUBCASE("slot order does not matter") {
    const auto base = fine.generate_segments(real, 17);
    const int n = static_cast<int>(base.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(4);
    std::shuffle(order.begin(), order.end(), rng);
    const auto shuffled = fine.generate_segments(real, 17, &order);
    REQUIRE(shuffled.size() == base.size());
    for (int i = 0; i < n; ++i) {
      CHECK(shuffled[i].slot == base[i].slot);
      CHECK(shuffled[i].coords == base[i].coords);
      CHECK(shuffled[i].mask == base[i].mask);
    }
    CHECK(fine.generate(real, 17) == fine.generate(real, 17, &order));
  }
  SUBCASE("per-slot streams with stochastic sampling") {
    PipelineConfig c = cfg;
    c.sampler.eta = 1.0;
    FineModel f(c, coarse.normalizer());
    f.prepare(corpus);
    const auto base = f.generate_segments(real, 5);
    std::vector<int> order(base.size());
    std::iota(order.rbegin(), order.rend(), 0);
    const auto rev = f.generate_segments(real, 5, &order);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(rev[i].mask == base[i].mask);
  }
  SUBCASE("segment shape and fine threshold") {
    const auto segs = fine.generate_segments(real, 2);
    CHECK(segs.size() == trace::compress_to_states(real, 0.5).size());
    for (const auto& s : segs) {
      CHECK(s.coords.size() == 60);
      CHECK(s.mask.size() == 60);
    }
    trace::FineSegment seg;
    seg.slot = 4;
    seg.coords = {{1, 1}, {2, 2}, {3, 3}};
    seg.mask = {0.71, 0.2, 0.9};
    const auto cells = trace::fine_cells(seg, cfg.fine_threshold);
    REQUIRE(cells.size() == 2);
    CHECK(cells[0].cell == 0);
    CHECK(cells[1].cell == 2);
  }
}

TEST_CASE("stage 2 without context") {
  const auto corpus = toy_traces(6);
  PipelineConfig cfg = tiny_config(9);
  cfg.use_context = false;
  FineModel fine(cfg, trace::Normalizer::fit(corpus));
  fine.prepare(corpus);
  CHECK(std::isfinite(fine.train_epoch(0)));
  const auto t = trace::build_coarse_trace(corpus[0], 3600, trace::most_frequent_poi(corpus));
  fine.generate(t, 1);
  CHECK(fine.context_extractions() == 1);
  for (const auto& [name, p] : fine.net().parameters()) CHECK(name.find("film") == std::string::npos);
}

TEST_CASE("synthesize end to end") {
  const auto city = toy::make_toy_city(7, 10);
  PipelineConfig cfg = tiny_config(10);
  cfg.coarse_train.epochs = 20;
  cfg.fine_train.epochs = 30;
  cfg.fine_train.optim.lr = 3e-3;
  CoarseModel coarse(cfg);
  coarse.prepare(city.traces);
  for (int e = 0; e < cfg.coarse_train.epochs; ++e) coarse.train_epoch(e);
  FineModel fine(cfg, coarse.normalizer());
  fine.prepare(city.traces);
  for (int e = 0; e < cfg.fine_train.epochs; ++e) fine.train_epoch(e);
  const align::PoiIndex index(city.pois);
  const auto hist = align::VisitHistory::build(city.traces, index);

  SynthesisStats stats;
  const auto hats = synthesize(coarse, fine, index, hist, 3, 123, &stats);
  CHECK(hats.size() == 3);
  for (const Hat& h : hats) {
    CHECK(validate_hat(h).empty());
    CHECK(h.duration == cfg.duration);
    for (const Event& e : h.events) {
      CHECK(e.t % 60 == 0);
      CHECK(index.find(e.poi) >= 0);
    }
  }
  CHECK(synthesize(coarse, fine, index, hist, 3, 123) == hats);
  CHECK(synthesize(coarse, fine, index, hist, 0, 123).empty());
}
