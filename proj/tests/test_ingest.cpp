// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "synhat/ingest.hpp"

using namespace synhat;
using namespace synhat::ingest;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

std::string fsq_row(const std::string& user, const std::string& venue, double lat, double lon,
                    const std::string& when, int tz = 0) {
  return user + "\t" + venue + "\tcat\tCafe\t" + std::to_string(lat) + "\t" + std::to_string(lon) + "\t" +
         std::to_string(tz) + "\t" + when + "\n";
}

std::vector<Hat> make_corpus(int n) {
  std::vector<Hat> c;
  for (int i = 0; i < n; ++i) c.push_back({"t" + std::to_string(i), {{"p", 0, 0, 0}}, 100});
  return c;
}

}  // namespace

TEST_CASE("Foursquare rows outside April-June 2012 are dropped") {
  IngestConfig cfg = city_preset("nyc");
  std::string text;
  text += fsq_row("1", "v1", 40.7, -74.0, "Tue Apr 03 18:00:09 +0000 2012");
  text += fsq_row("1", "v2", 40.7, -74.0, "Sat Mar 31 23:00:00 +0000 2012");
  text += fsq_row("1", "v3", 40.7, -74.0, "Sun Jul 01 00:00:00 +0000 2012");
  text += fsq_row("2", "v4", 50.0, -74.0, "Tue Apr 03 18:00:09 +0000 2012");
  const auto path = write_temp("fsq.tsv", text);
  const auto r = parse_checkins(path, cfg);
  CHECK(r.rows == 4);
  CHECK(r.outside_window == 2);
  CHECK(r.outside_bbox == 1);
  REQUIRE(r.by_user.size() == 1);
  CHECK(r.by_user.at("1").size() == 1);
  CHECK(r.by_user.at("1")[0].poi == "v1");
  CHECK(r.by_user.at("1")[0].time == parse_date("2012-04-03") + 18 * 3600 + 9);
}

TEST_CASE("timezone offset shifts Foursquare times to local") {
  auto c = parse_row("u\tv\tc\tn\t40.7\t-74.0\t-240\tTue Apr 03 18:00:09 +0000 2012", SourceFormat::FoursquareTsv);
  REQUIRE(c);
  CHECK(c->time == parse_date("2012-04-03") + 14 * 3600 + 9);
}

TEST_CASE("empty file and malformed rows") {
  IngestConfig cfg = city_preset("nyc");
  auto empty = parse_checkins(write_temp("empty.tsv", ""), cfg);
  CHECK(empty.rows == 0);
  CHECK(empty.malformed == 0);
  CHECK(empty.by_user.empty());

  std::string text = fsq_row("1", "v1", 40.7, -74.0, "Tue Apr 03 18:00:09 +0000 2012");
  text += "1\tv1\tcat\tCafe\tnot-a-number\t-74.0\t0\tTue Apr 03 18:00:09 +0000 2012\n";
  text += "short\trow\n";
  auto r = parse_checkins(write_temp("bad.tsv", text), cfg);
  CHECK(r.malformed == 2);
  CHECK(r.by_user.at("1").size() == 1);

  CHECK_THROWS(parse_checkins("/nonexistent/file.tsv", cfg));
  CHECK_THROWS_AS(parse_format("csv"), std::invalid_argument);
}

TEST_CASE("Gowalla and jsonl layouts parse") {
  auto g = parse_row("42\t2010-10-19T23:55:27Z\t59.33\t18.06\t9001", SourceFormat::GowallaTsv);
  REQUIRE(g);
  CHECK(g->user == "42");
  CHECK(g->poi == "9001");
  CHECK(g->time == parse_date("2010-10-19") + 23 * 3600 + 55 * 60 + 27);
  auto j = parse_row(R"({"user":"u","poi":7,"lat":1.0,"lon":2.0,"time":1000})", SourceFormat::Jsonl);
  REQUIRE(j);
  CHECK(j->poi == "7");
  CHECK_FALSE(parse_row(R"({"user":"u"})", SourceFormat::Jsonl));
}

TEST_CASE("build_corpus keeps traces with more than min_visits events") {
  IngestConfig cfg = city_preset("atx");
  cfg.min_visits = 5;
  const std::int64_t start = parse_date(cfg.window_start);
  std::map<std::string, std::vector<Checkin>> users;
  for (int i = 0; i < 5; ++i) users["five"].push_back({"five", "p", 30.2, -97.7, start + 1000 * i});
  for (int i = 0; i < 6; ++i) users["six"].push_back({"six", "p", 30.2, -97.7, start + 86400 + 500 * (5 - i)});
  auto corpus = build_corpus(users, cfg);
  REQUIRE(corpus.size() == 1);
  CHECK(corpus[0].events.size() == 6);
  CHECK(corpus[0].duration == cfg.duration);
  CHECK(corpus[0].events.front().t == 86400);
  for (const auto& h : corpus) CHECK(validate_hat(h).empty());
}

TEST_CASE("build_corpus cuts consecutive windows and honours one-window mode") {
  IngestConfig cfg = city_preset("atx");
  cfg.min_visits = 1;
  const std::int64_t start = parse_date(cfg.window_start);
  std::map<std::string, std::vector<Checkin>> users;
  for (int w = 0; w < 3; ++w)
    for (int i = 0; i < 3; ++i) users["u"].push_back({"u", "p", 30.2, -97.7, start + w * cfg.duration + 3600 * i});
  auto all = build_corpus(users, cfg);
  CHECK(all.size() == 3);
  for (const auto& h : all) {
    CHECK(h.events.size() == 3);
    CHECK(h.events.front().t == 0);
    CHECK(validate_hat(h).empty());
  }
  cfg.one_window_per_user = true;
  CHECK(build_corpus(users, cfg).size() == 1);
}

TEST_CASE("split sizes and determinism") {
  auto s10 = split(make_corpus(10), 1);
  CHECK(s10.train.size() == 7);
  CHECK(s10.val.size() == 1);
  CHECK(s10.test.size() == 2);

  auto a = split(make_corpus(100), 5);
  auto b = split(make_corpus(100), 5);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);

  // floor(0.7 n), floor(0.1 n), remainder: 4482 -> 3137, 448, 897.
  const std::size_t n = 4482;
  auto big = split(make_corpus(static_cast<int>(n)), 9);
  CHECK(big.train.size() == 3137);
  CHECK(big.val.size() == 448);
  CHECK(big.test.size() == 897);
  CHECK(big.train.size() + big.val.size() + big.test.size() == n);
  std::set<std::string> ids;
  for (const auto* part : {&big.train, &big.val, &big.test})
    for (const auto& h : *part) ids.insert(h.trace_id);
  CHECK(ids.size() == n);

  CHECK_THROWS_AS(split(make_corpus(9), 1), std::invalid_argument);
}

TEST_CASE("ingest config file with line-anchored errors") {
  auto ok = write_temp("ingest_ok.toml", "[ingest]\nmin_visits = 3\nduration = 604800\n");
  auto cfg = load_ingest_config(ok, "nyc");
  CHECK(cfg.min_visits == 3);
  CHECK(cfg.duration == 604800);
  CHECK(cfg.window_start == "2012-04-01");

  auto bad = write_temp("ingest_bad.toml", "[ingest]\n\nformat = parquet\n");
  try {
    load_ingest_config(bad, "nyc");
    FAIL("expected error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
}
