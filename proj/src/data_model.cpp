// SPDX-License-Identifier: Apache-2.0
#include "synhat/data_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace synhat {

using nlohmann::json;

std::vector<std::string> validate_hat(const Hat& h) {
  std::vector<std::string> out;
  if (h.events.empty()) out.emplace_back("empty trace");
  if (h.duration <= 0) out.emplace_back("non-positive duration");
  bool lat_bad = false, lon_bad = false, t_bad = false, order_bad = false, coord_bad = false;
  for (std::size_t i = 0; i < h.events.size(); ++i) {
    const Event& e = h.events[i];
    if (!std::isfinite(e.lat) || !std::isfinite(e.lon)) coord_bad = true;
    if (e.lat < -90.0 || e.lat > 90.0) lat_bad = true;
    if (e.lon < -180.0 || e.lon > 180.0) lon_bad = true;
    if (e.t < 0 || e.t >= h.duration) t_bad = true;
    if (i > 0 && e.t < h.events[i - 1].t) order_bad = true;
  }
  if (coord_bad) out.emplace_back("non-finite coordinate");
  if (lat_bad) out.emplace_back("lat out of range");
  if (lon_bad) out.emplace_back("lon out of range");
  if (t_bad) out.emplace_back("timestamp outside window");
  if (order_bad) out.emplace_back("non-monotonic timestamps");
  return out;
}

std::string hat_to_json_line(const Hat& h) {
  json events = json::array();
  for (const Event& e : h.events) events.push_back({{"poi", e.poi}, {"lat", e.lat}, {"lon", e.lon}, {"t", e.t}});
  json j = {{"trace_id", h.trace_id}, {"duration", h.duration}, {"events", std::move(events)}};
  return j.dump();
}

Hat hat_from_json_line(std::string_view line) {
  const json j = json::parse(line);
  Hat h;
  h.trace_id = j.at("trace_id").get<std::string>();
  for (const auto& e : j.at("events")) {
    h.events.push_back({e.at("poi").get<std::string>(), e.at("lat").get<double>(),
                        e.at("lon").get<double>(), e.at("t").get<Seconds>()});
  }
  if (j.contains("duration")) {
    h.duration = j.at("duration").get<Seconds>();
  } else if (!h.events.empty()) {
    h.duration = h.events.back().t + 1;
  }
  return h;
}

std::vector<Hat> read_hats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Hat> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(hat_from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_hats(const std::filesystem::path& path, const std::vector<Hat>& hats) {
  std::string buf;
  for (const Hat& h : hats) {
    buf += hat_to_json_line(h);
    buf += '\n';
  }
  write_file_atomic(path, buf);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace synhat
