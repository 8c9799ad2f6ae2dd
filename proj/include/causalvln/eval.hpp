#pragma once

// Navigation error, success, oracle success and SPL, per episode and per split.

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalvln/navworld.hpp"

namespace causalvln::eval {

struct EpisodeResult {
  std::string episode_id;
  std::vector<int> trajectory;
  int stop_node = 0;
  double ne = 0.0;
  bool success = false;
  bool oracle_success = false;
  double spl = 0.0;
  double path_length = 0.0;
};

/// `trajectory` lists visited nodes starting at the episode start; the last
/// node is where the agent stopped. Revisits count toward path length.
inline EpisodeResult score(const nav::NavWorld& w, const nav::Episode& e, const std::vector<int>& trajectory,
                           const nav::GeodesicTable* table = nullptr) {
  if (trajectory.empty()) throw std::invalid_argument("empty trajectory");
  if (trajectory.front() != e.path.front())
    throw std::invalid_argument("trajectory does not begin at the episode start");
  auto geo = [&](int a, int b) { return table ? (*table)(a, b) : nav::geodesic(w, a, b); };
  EpisodeResult r;
  r.episode_id = e.id;
  r.trajectory = trajectory;
  for (std::size_t i = 0; i + 1 < trajectory.size(); ++i) {
    if (trajectory[i] == trajectory[i + 1]) continue;
    if (!w.adjacent(trajectory[i], trajectory[i + 1]))
      throw std::invalid_argument("trajectory leaves the graph between " + std::to_string(trajectory[i]) + " and " +
                                  std::to_string(trajectory[i + 1]));
    r.path_length += w.edge_length(trajectory[i], trajectory[i + 1]);
  }
  r.stop_node = trajectory.back();
  r.ne = geo(r.stop_node, e.goal);
  r.success = r.ne <= e.success_radius;
  double closest = r.ne;
  for (int n : trajectory) closest = std::min(closest, geo(n, e.goal));
  r.oracle_success = closest <= e.success_radius;
  const double shortest = geo(e.path.front(), e.goal);
  r.spl = r.success ? (shortest > 0.0 ? shortest / std::max(shortest, r.path_length) : 1.0) : 0.0;
  return r;
}

/// SR, OSR and SPL in percent; NE in world units.
struct SplitReport {
  std::string variant;
  std::string split;
  std::size_t count = 0;
  double ne = 0.0;
  double sr = 0.0;
  double osr = 0.0;
  double spl = 0.0;
  nlohmann::json config;
};

inline SplitReport aggregate(const std::string& variant, const std::string& split,
                             const std::vector<EpisodeResult>& results, nlohmann::json config = {}) {
  if (results.empty()) throw std::invalid_argument("cannot aggregate zero episodes");
  SplitReport r{variant, split, results.size(), 0, 0, 0, 0, std::move(config)};
  for (const auto& e : results) {
    r.ne += e.ne;
    r.sr += e.success ? 1.0 : 0.0;
    r.osr += e.oracle_success ? 1.0 : 0.0;
    r.spl += e.spl;
  }
  const double n = static_cast<double>(results.size());
  r.ne /= n;
  r.sr *= 100.0 / n;
  r.osr *= 100.0 / n;
  r.spl *= 100.0 / n;
  return r;
}

struct GapRow {
  std::string variant;
  std::string metric;
  double gap = 0.0;
};

/// seen - unseen for SR, OSR, SPL; unseen - seen for NE. Positive means the
/// agent does worse on unseen worlds.
inline std::vector<GapRow> gap_report(const SplitReport& seen, const SplitReport& unseen) {
  if (seen.variant != unseen.variant)
    throw std::invalid_argument("gap between different variants: " + seen.variant + " vs " + unseen.variant);
  if (seen.config != unseen.config) throw std::invalid_argument("gap between reports with different configs");
  return {{seen.variant, "SR", seen.sr - unseen.sr},
          {seen.variant, "SPL", seen.spl - unseen.spl},
          {seen.variant, "OSR", seen.osr - unseen.osr},
          {seen.variant, "NE", unseen.ne - seen.ne}};
}

/// Rows for one metric across variants, smallest gap first.
inline std::vector<GapRow> order_by_gap(const std::vector<GapRow>& rows, const std::string& metric) {
  std::vector<GapRow> out;
  for (const auto& r : rows)
    if (r.metric == metric) out.push_back(r);
  std::stable_sort(out.begin(), out.end(), [](const GapRow& a, const GapRow& b) { return a.gap < b.gap; });
  return out;
}

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline void write_report_csv(std::ostream& os, const std::vector<SplitReport>& reports) {
  os << "variant,split,count,NE,SR,OSR,SPL\n";
  for (const auto& r : reports)
    os << r.variant << ',' << r.split << ',' << r.count << ',' << fixed2(r.ne) << ',' << fixed2(r.sr) << ','
       << fixed2(r.osr) << ',' << fixed2(r.spl) << '\n';
}

inline void write_gap_csv(std::ostream& os, const std::vector<GapRow>& rows) {
  os << "variant,metric,gap\n";
  for (const auto& r : rows) os << r.variant << ',' << r.metric << ',' << fixed2(r.gap) << '\n';
}

inline nlohmann::json to_json(const SplitReport& r) {
  return {{"variant", r.variant}, {"split", r.split}, {"count", r.count}, {"NE", r.ne},
          {"SR", r.sr},           {"OSR", r.osr},     {"SPL", r.spl},     {"config", r.config}};
}

}  // namespace causalvln::eval
