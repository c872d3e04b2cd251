// SPDX-License-Identifier: Apache-2.0
#pragma once

// Structured report writers. Every artifact carries the tool version, seed and
// configuration hash: CSVs in a leading comment line, JSON under "meta".

#include <algorithm>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasewatt/analysis.hpp"
#include "phasewatt/orchestrator.hpp"
#include "phasewatt/util.hpp"

namespace phasewatt {

struct ArtifactMeta {
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string config_hash;
};

inline nlohmann::json meta_json(const ArtifactMeta& m) {
  return {{"tool_version", m.tool_version}, {"seed", m.seed}, {"config_hash", m.config_hash}};
}

inline void write_meta_line(std::ostream& os, const ArtifactMeta& m) {
  os << "# tool_version=" << m.tool_version << " seed=" << m.seed << " config_hash=" << m.config_hash << '\n';
}

inline void write_aggregates_csv(std::ostream& os, const ArtifactMeta& m, const std::vector<AggregatedPoint>& pts) {
  write_meta_line(os, m);
  os << "config_id,architecture,phase,batch,context,output_len,lever,lever_value,n,median_mj_per_tok,"
        "stddev_mj_per_tok,median_tok_per_s,stddev_tok_per_s,median_power_w,actual_clock_mhz,cap_engaged,"
        "throttled_reps,noisy\n";
  for (const auto& p : pts) {
    const auto& c = p.config;
    os << p.config_id << ',' << c.architecture << ',' << to_string(c.phase) << ',' << c.batch << ',' << c.context
       << ',' << c.output_len << ',' << to_string(c.lever()) << ',' << format_double(c.lever_value()) << ',' << p.n
       << ',' << format_double(p.median_mj_per_tok) << ',' << format_double(p.stddev_mj_per_tok) << ','
       << format_double(p.median_tok_per_s) << ',' << format_double(p.stddev_tok_per_s) << ','
       << format_double(p.median_power_w) << ',' << p.actual_clock_mhz << ',' << (p.cap_engaged ? 1 : 0) << ','
       << p.throttled_reps << ',' << (p.noisy ? 1 : 0) << '\n';
  }
}

/// Per-cell frontier rows: every lever point of the cell with its frontier membership.
inline void write_frontier_csv(std::ostream& os, const ArtifactMeta& m, const std::vector<AggregatedPoint>& pts) {
  write_meta_line(os, m);
  os << "architecture,phase,batch,context,label,tok_s,tok_per_j,on_frontier\n";
  std::map<CellKey, std::vector<ParetoPoint>> cells;
  for (const auto& p : pts)
    cells[{p.config.architecture, p.config.phase, p.config.batch, p.config.context}].push_back(pareto_point(p));
  for (const auto& [k, points] : cells) {
    const auto front = pareto_frontier(points);
    for (const auto& p : points) {
      const bool on = std::find(front.begin(), front.end(), p) != front.end();
      os << k.architecture << ',' << to_string(k.phase) << ',' << k.batch << ',' << k.context << ',' << p.label << ','
         << format_double(p.throughput) << ',' << format_double(p.efficiency) << ',' << (on ? 1 : 0) << '\n';
    }
  }
}

inline void write_clock_map_csv(std::ostream& os, const ArtifactMeta& m, const ClockMap& map, double budget) {
  write_meta_line(os, m);
  os << "architecture,phase,batch,context,min_energy_clock_mhz,budget_clock_mhz,loss_budget,reference_clock_mhz,"
        "saving_at_budget_pct,min_energy_mj_per_tok,budget_mj_per_tok,reference_mj_per_tok\n";
  for (const auto& [k, c] : map) {
    const double saving = 100.0 * (1.0 - c.at(c.budget_clock).mj_per_tok / c.at(c.reference_clock).mj_per_tok);
    os << k.architecture << ',' << to_string(k.phase) << ',' << k.batch << ',' << k.context << ','
       << c.min_energy_clock << ',' << c.budget_clock << ',' << format_double(budget) << ',' << c.reference_clock
       << ',' << format_double(saving) << ',' << format_double(c.at(c.min_energy_clock).mj_per_tok) << ','
       << format_double(c.at(c.budget_clock).mj_per_tok) << ',' << format_double(c.at(c.reference_clock).mj_per_tok)
       << '\n';
  }
}

inline nlohmann::json inertness_json(const InertnessVerdict& v) {
  nlohmann::json anomalies = nlohmann::json::array();
  for (const auto& a : v.anomalies)
    anomalies.push_back({{"cap_w", a.row.cap_w},
                         {"clock_mhz", a.row.clock_mhz},
                         {"power_w", a.row.power_w},
                         {"clock_delta_mhz", a.clock_delta_mhz},
                         {"power_delta_w", a.power_delta_w},
                         {"throttling_artefact", a.throttling_artefact}});
  return {{"verdict", to_string(v.kind)},
          {"anomalies", anomalies},
          {"max_power_over_caps_w", v.max_power_over_caps_w},
          {"reference_clock_mhz", v.reference_clock_mhz},
          {"reference_power_w", v.reference_power_w}};
}

inline nlohmann::json clamp_json(const ClampReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.clamped_pairs) pairs.push_back({{"requested_mhz", p.requested}, {"actual_mhz", p.actual}});
  return {{"clamped", r.clamped},
          {"ceiling_mhz", r.ceiling_mhz},
          {"honoured_exactly_mhz", r.honoured},
          {"honoured_max_mhz", r.honoured_max_mhz ? nlohmann::json(*r.honoured_max_mhz) : nlohmann::json(nullptr)},
          {"clamped_pairs", pairs}};
}

inline nlohmann::json dvfs_class_json(const DvfsClass& c) {
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& [b, clk] : c.evidence) ev.push_back({{"batch", b}, {"budget_clock_mhz", clk}});
  return {{"class", to_string(c.kind)}, {"evidence", ev}};
}

inline nlohmann::json crossover_json(const CrossoverReport& r) {
  return {{"axis", to_string(r.axis)},
          {"pair", {r.first, r.second}},
          {"batch", r.batch},
          {"threshold", r.threshold ? nlohmann::json(*r.threshold) : nlohmann::json(nullptr)},
          {"lower_after", r.lower_after}};
}

inline void write_request_energy_csv(std::ostream& os, const ArtifactMeta& m,
                                     const std::vector<RequestEnergyCurve>& curves) {
  write_meta_line(os, m);
  os << "architecture,batch,context,prefill_clock_mhz,decode_clock_mhz,output_tokens,joules_per_sequence\n";
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.curve.x.size(); ++i)
      os << c.architecture << ',' << c.batch << ',' << c.context << ',' << c.prefill_clock << ',' << c.decode_clock
         << ',' << format_double(c.curve.x[i]) << ',' << format_double(c.curve.y[i]) << '\n';
}

inline void write_residuals_csv(std::ostream& os, const ArtifactMeta& m, const ProfileFit& fit,
                                const PowerCalibration& power) {
  write_meta_line(os, m);
  os << "arch,quantity,target,tolerance,fitted,residual,within_tolerance,source_tag\n";
  for (const auto& r : fit.residuals)
    os << r.target.architecture << ',' << r.target.quantity << ',' << format_double(r.target.value) << ','
       << format_double(r.target.tolerance) << ',' << format_double(r.fitted) << ',' << format_double(r.residual) << ','
       << (r.within_tolerance ? 1 : 0) << ',' << r.target.source_tag << '\n';
  for (const auto& r : power.residuals)
    os << r.fixture.architecture << ",fixture_" << to_string(r.fixture.phase) << "_power_w:b=" << r.fixture.batch
       << ":clk=" << r.fixture.clock_mhz << ',' << format_double(r.fixture.power_w) << ",," << format_double(r.fitted_w)
       << ',' << format_double(r.residual_w) << ",,fixture\n";
}

}  // namespace phasewatt
