#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dvad/audio/dataset.hpp"
#include "dvad/eval/evaluate.hpp"

namespace dvad {

/// One training run of one model under one method.
struct MetricsReport {
  std::string model;
  std::string method;
  std::uint64_t seed = 0;
  std::map<std::string, EvalResult> splits;  // "val", "test", ...
  std::optional<PlaybackResult> playback;
};

struct AggregateReport {
  std::string model;
  std::string method;
  std::size_t n_runs = 0;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, EvalResult> splits;  // means; n is taken from the first run
  std::optional<PlaybackResult> playback;
  std::vector<MetricsReport> runs;
};

// Published Student 1 playback F1 at 1/5/10/20 m, shown beside results for context.
inline const std::map<int, double>& reference_playback_student1() {
  static const std::map<int, double> r{{1, 0.94595}, {5, 0.93945}, {10, 0.93875}, {20, 0.79895}};
  return r;
}

/// Arithmetic means over runs. All runs must share model and method.
inline AggregateReport aggregate_runs(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_runs: no reports");
  AggregateReport a;
  a.model = reports.front().model;
  a.method = reports.front().method;
  a.n_runs = reports.size();
  a.runs = reports;
  const double k = static_cast<double>(reports.size());
  bool all_playback = true;
  for (const auto& r : reports) {
    if (r.model != a.model || r.method != a.method) {
      throw std::invalid_argument("aggregate_runs: mixing " + a.model + "/" + a.method + " with " + r.model + "/" +
                                  r.method);
    }
    if (r.splits.size() != reports.front().splits.size()) throw std::invalid_argument("aggregate_runs: runs report different splits");
    a.seeds.push_back(r.seed);
    all_playback = all_playback && r.playback.has_value();
    for (const auto& [name, m] : r.splits) {
      if (!reports.front().splits.contains(name)) throw std::invalid_argument("aggregate_runs: split '" + name + "' not in every run");
      auto& s = a.splits[name];
      s.auc += m.auc / k;
      s.f1 += m.f1 / k;
      s.n = reports.front().splits.at(name).n;
    }
  }
  if (all_playback) {
    PlaybackResult p;
    for (const auto& r : reports) {
      for (const auto& [d, f] : r.playback->f1) p.f1[d] += f / k;
      p.mean_f1 += r.playback->mean_f1 / k;
    }
    a.playback = p;
  }
  return a;
}

inline nlohmann::json to_json(const EvalResult& e) { return {{"auc", e.auc}, {"f1", e.f1}, {"n", e.n}}; }

inline nlohmann::json to_json(const PlaybackResult& p) {
  nlohmann::json d = nlohmann::json::object();
  for (const auto& [m, f] : p.f1) d[std::to_string(m)] = f;
  return {{"f1_by_distance_m", d}, {"mean_f1", p.mean_f1}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"model", r.model}, {"method", r.method}, {"seed", r.seed}};
  j["splits"] = nlohmann::json::object();
  for (const auto& [name, m] : r.splits) j["splits"][name] = to_json(m);
  if (r.playback) j["playback"] = to_json(*r.playback);
  return j;
}

/// "summary": average AUC and F1 per (model, method) on `split`;
/// "playback": per-distance playback F1 where available.
inline nlohmann::json report_json(const std::vector<AggregateReport>& rows, const std::string& split = "test") {
  nlohmann::json table = nlohmann::json::array(), fig = nlohmann::json::array(), runs = nlohmann::json::array();
  for (const auto& a : rows) {
    nlohmann::json row = {{"model", a.model}, {"method", a.method}, {"n_runs", a.n_runs}, {"seeds", a.seeds}};
    if (const auto it = a.splits.find(split); it != a.splits.end()) {
      row["avg_auc"] = it->second.auc;
      row["avg_f1"] = it->second.f1;
      row["n"] = it->second.n;
    }
    table.push_back(row);
    if (a.playback) {
      nlohmann::json entry = {{"model", a.model}, {"method", a.method}};
      entry.update(to_json(*a.playback));
      if (a.model == "student1") {
        nlohmann::json ref = nlohmann::json::object();
        for (const auto& [d, f] : reference_playback_student1()) ref[std::to_string(d)] = f;
        entry["reference_f1_by_distance_m"] = ref;
      }
      fig.push_back(entry);
    }
    for (const auto& r : a.runs) runs.push_back(to_json(r));
  }
  return {{"split", split}, {"summary", table}, {"playback", fig}, {"runs", runs}};
}

/// model,method,distance_m,f1 rows for every aggregate with playback results.
inline std::string playback_csv(const std::vector<AggregateReport>& rows) {
  std::ostringstream out;
  out << "model,method,distance_m,f1\n";
  char buf[32];
  for (const auto& a : rows) {
    if (!a.playback) continue;
    for (const auto& [d, f] : a.playback->f1) {
      std::snprintf(buf, sizeof buf, "%.6f", f);
      out << a.model << ',' << a.method << ',' << d << ',' << buf << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.6f", a.playback->mean_f1);
    out << a.model << ',' << a.method << ",mean," << buf << '\n';
  }
  return out.str();
}

}  // namespace dvad
