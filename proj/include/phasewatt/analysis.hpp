// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "phasewatt/device.hpp"
#include "phasewatt/error.hpp"
#include "phasewatt/metrics.hpp"
#include "phasewatt/orchestrator.hpp"
#include "phasewatt/workload.hpp"

namespace phasewatt {

// ---------------------------------------------------------------------------
// Pareto frontier over (throughput, efficiency), both maximised.
// ---------------------------------------------------------------------------

struct ParetoPoint {
  double throughput = 0.0;  // tokens/s
  double efficiency = 0.0;  // tokens/J
  std::string label;

  bool operator==(const ParetoPoint&) const = default;
};

/// True when `a` is at least as good as `b` in both coordinates and better in one.
inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return a.throughput >= b.throughput && a.efficiency >= b.efficiency &&
         (a.throughput > b.throughput || a.efficiency > b.efficiency);
}

namespace detail {
inline bool frontier_order(const ParetoPoint& a, const ParetoPoint& b) {
  return std::tie(a.throughput, a.efficiency, a.label) < std::tie(b.throughput, b.efficiency, b.label);
}
}  // namespace detail

/// Non-dominated subset, ties kept, sorted by ascending throughput. O(n log n).
inline std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points) {
  for (const auto& p : points)
    if (!(p.throughput > 0.0) || !(p.efficiency > 0.0))
      throw Error(Errc::invalid_argument, "pareto point '" + p.label + "' needs positive coordinates");
  // Descending throughput; a point survives when no faster point is at least as
  // efficient and no equally fast point is more efficient.
  std::sort(points.begin(), points.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    if (a.throughput != b.throughput) return a.throughput > b.throughput;
    return a.efficiency > b.efficiency;
  });
  std::vector<ParetoPoint> out;
  double best_faster = -INFINITY;
  for (std::size_t i = 0; i < points.size();) {
    std::size_t j = i;
    while (j < points.size() && points[j].throughput == points[i].throughput) ++j;
    const double group_max = points[i].efficiency;
    if (group_max > best_faster)
      for (std::size_t k = i; k < j && points[k].efficiency == group_max; ++k) out.push_back(points[k]);
    best_faster = std::max(best_faster, group_max);
    i = j;
  }
  std::sort(out.begin(), out.end(), detail::frontier_order);
  return out;
}

struct DominanceWitness {
  ParetoPoint cap_point;
  std::optional<ParetoPoint> lock_point;  // absent when no lock point dominates it
  double margin = 0.0;                    // best relative improvement of the witness
};

struct DominanceVerdict {
  bool dominated = false;  // every cap point dominated beyond the noise margin
  bool degenerate = false; // cap points cluster within the degeneracy tolerance
  double min_margin = 0.0;
  std::vector<DominanceWitness> witnesses;
};

/// Lock-versus-cap dominance with a noise margin. A lock point dominates a cap
/// point when it is no worse than (1 - margin) of it in both coordinates and better
/// by more than `margin` in at least one.
inline DominanceVerdict dominance_verdict(const std::vector<ParetoPoint>& lock_points,
                                          const std::vector<ParetoPoint>& cap_points, double margin = 0.01,
                                          double degenerate_tolerance = 0.03) {
  if (lock_points.empty() || cap_points.empty())
    throw Error(Errc::invalid_argument, "dominance_verdict needs non-empty lock and cap sets");
  DominanceVerdict v;
  v.dominated = true;
  v.min_margin = INFINITY;
  for (const auto& c : cap_points) {
    DominanceWitness w{c, std::nullopt, 0.0};
    for (const auto& l : lock_points) {
      const double gt = l.throughput / c.throughput - 1.0;
      const double ge = l.efficiency / c.efficiency - 1.0;
      if (gt < -margin || ge < -margin) continue;
      const double gain = std::max(gt, ge);
      if (gain <= margin) continue;
      if (!w.lock_point || gain > w.margin) {
        w.lock_point = l;
        w.margin = gain;
      }
    }
    if (!w.lock_point) v.dominated = false;
    v.min_margin = std::min(v.min_margin, w.margin);
    v.witnesses.push_back(w);
  }
  auto spread = [&](auto get) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& c : cap_points) {
      lo = std::min(lo, get(c));
      hi = std::max(hi, get(c));
    }
    return hi / lo - 1.0;
  };
  v.degenerate = cap_points.size() >= 2 &&
                 spread([](const ParetoPoint& p) { return p.throughput; }) <= degenerate_tolerance &&
                 spread([](const ParetoPoint& p) { return p.efficiency; }) <= degenerate_tolerance;
  return v;
}

inline ParetoPoint pareto_point(const AggregatedPoint& a) {
  const double tok_per_j = 1e3 / a.median_mj_per_tok;
  return {a.median_tok_per_s, tok_per_j, a.config.control.describe()};
}

// ---------------------------------------------------------------------------
// Cap inertness and clock clamp detection.
// ---------------------------------------------------------------------------

enum class InertnessKind { inert, engaged, mixed };

inline const char* to_string(InertnessKind k) {
  switch (k) {
    case InertnessKind::inert: return "inert";
    case InertnessKind::engaged: return "engaged";
    case InertnessKind::mixed: return "mixed";
  }
  return "mixed";
}

struct CapRow {
  double cap_w = 0.0;
  Mhz clock_mhz = 0;
  double power_w = 0.0;
};

struct CapAnomaly {
  CapRow row;
  int clock_delta_mhz = 0;  // vs the reference clock
  double power_delta_w = 0.0;
  bool throttling_artefact = false;
};

struct InertnessVerdict {
  InertnessKind kind = InertnessKind::inert;
  std::vector<CapAnomaly> anomalies;
  double max_power_over_caps_w = 0.0;
  Mhz reference_clock_mhz = 0;
  double reference_power_w = 0.0;
};

namespace detail {
inline int level_index(const std::vector<Mhz>& levels, Mhz clock) {
  // index of the highest level not above `clock`
  int idx = 0;
  for (std::size_t i = 0; i < levels.size(); ++i)
    if (levels[i] <= clock) idx = static_cast<int>(i);
  return idx;
}
}  // namespace detail

/// Classifies one architecture's cap sweep. The reference operating point is the
/// median clock and power over all rows; rows off the reference clock, or off the
/// reference power by more than `power_tolerance`, are anomalies. An anomaly whose
/// clock and power both dropped while still under its cap is tagged as a throttling
/// artefact rather than cap action.
inline InertnessVerdict detect_cap_inertness(std::vector<CapRow> rows, const DeviceSpec& spec,
                                             double power_tolerance = 0.02) {
  if (rows.size() < 2) throw Error(Errc::invalid_argument, "cap inertness needs at least two cap levels");
  std::sort(rows.begin(), rows.end(), [](const CapRow& a, const CapRow& b) { return a.cap_w < b.cap_w; });
  InertnessVerdict v;
  std::vector<double> clocks, powers;
  for (const auto& r : rows) {
    clocks.push_back(r.clock_mhz);
    powers.push_back(r.power_w);
    v.max_power_over_caps_w = std::max(v.max_power_over_caps_w, r.power_w);
  }
  v.reference_clock_mhz = static_cast<Mhz>(std::lround(median(clocks)));
  v.reference_power_w = median(powers);

  for (const auto& r : rows) {
    const bool clock_off = r.clock_mhz != v.reference_clock_mhz;
    const bool power_off = std::abs(r.power_w - v.reference_power_w) > power_tolerance * v.reference_power_w;
    if (!clock_off && !power_off) continue;
    CapAnomaly a{r, r.clock_mhz - v.reference_clock_mhz, r.power_w - v.reference_power_w, false};
    a.throttling_artefact = a.clock_delta_mhz < 0 && a.power_delta_w < 0 && r.power_w < r.cap_w * (1.0 - power_tolerance);
    v.anomalies.push_back(a);
  }

  const auto [lo, hi] = std::minmax_element(clocks.begin(), clocks.end());
  const auto& levels = spec.supported_locks_mhz;
  const int spread = detail::level_index(levels, static_cast<Mhz>(*hi)) - detail::level_index(levels, static_cast<Mhz>(*lo));
  if (v.max_power_over_caps_w < rows.front().cap_w && spread <= 1) {
    v.kind = InertnessKind::inert;
    return v;
  }
  int engaged = 0;
  bool monotone = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].power_w >= rows[i].cap_w * (1.0 - power_tolerance)) ++engaged;
    if (i > 0 && rows[i].clock_mhz < rows[i - 1].clock_mhz) monotone = false;
  }
  v.kind = engaged >= 1 && monotone ? InertnessKind::engaged : InertnessKind::mixed;
  return v;
}

struct ClockPair {
  Mhz requested = 0;
  Mhz actual = 0;
};

struct ClampReport {
  bool clamped = false;
  Mhz ceiling_mhz = 0;                 // highest actual clock under locks
  std::optional<Mhz> honoured_max_mhz; // highest request honoured exactly
  std::vector<Mhz> honoured;           // requests honoured exactly, ascending
  std::vector<ClockPair> clamped_pairs;
};

inline ClampReport detect_clock_clamp(const std::vector<ClockPair>& pairs) {
  if (pairs.empty()) throw Error(Errc::invalid_argument, "clamp detection needs at least one pair");
  ClampReport r;
  for (const auto& p : pairs) {
    r.ceiling_mhz = std::max(r.ceiling_mhz, p.actual);
    if (p.actual < p.requested) r.clamped_pairs.push_back(p);
  }
  r.clamped = !r.clamped_pairs.empty();
  // Under a clamp, a request equal to the ceiling is indistinguishable from a clamped one.
  std::set<Mhz> honoured;
  for (const auto& p : pairs)
    if (p.actual == p.requested && (!r.clamped || p.requested < r.ceiling_mhz)) honoured.insert(p.requested);
  r.honoured.assign(honoured.begin(), honoured.end());
  if (!r.honoured.empty()) r.honoured_max_mhz = r.honoured.back();
  return r;
}

struct WastedBand {
  double throughput_delta = 0.0;  // higher setting relative to lower, fraction
  double power_delta = 0.0;
};

/// Throughput and power gained by the higher of two settings.
inline WastedBand wasted_band(const AggregatedPoint& lower, const AggregatedPoint& higher) {
  return {higher.median_tok_per_s / lower.median_tok_per_s - 1.0, higher.median_power_w / lower.median_power_w - 1.0};
}

// ---------------------------------------------------------------------------
// Optimal clock map and DVFS classes.
// ---------------------------------------------------------------------------

struct CellKey {
  std::string architecture;
  Phase phase = Phase::decode;
  int batch = 1;
  int context = 1;

  auto tie() const { return std::tie(architecture, phase, batch, context); }
  bool operator<(const CellKey& o) const { return tie() < o.tie(); }
  bool operator==(const CellKey& o) const { return tie() == o.tie(); }
};

struct ClockSample {
  Mhz lock_mhz = 0;
  Mhz actual_mhz = 0;
  double mj_per_tok = 0.0;
  double tok_per_s = 0.0;
  double power_w = 0.0;
  std::string config_id;
};

struct CellChoice {
  Mhz min_energy_clock = 0;
  Mhz budget_clock = 0;
  Mhz reference_clock = 0;  // highest swept lock; throughput and savings are relative to it
  std::vector<ClockSample> samples;  // ascending lock

  const ClockSample& at(Mhz lock) const {
    for (const auto& s : samples)
      if (s.lock_mhz == lock) return s;
    throw Error(Errc::incomplete_cell, "no sample at " + std::to_string(lock) + " MHz");
  }
};

using ClockMap = std::map<CellKey, CellChoice>;

/// Per cell: the lock minimising median energy per token (ties to the lower clock)
/// and the lowest lock whose throughput loss against the highest swept lock stays
/// within `loss_budget`.
inline ClockMap optimal_clock_map(const std::vector<AggregatedPoint>& points, const std::vector<Mhz>& clocks,
                                  double loss_budget) {
  if (clocks.empty()) throw Error(Errc::invalid_argument, "clock map needs a clock list");
  std::vector<Mhz> levels = clocks;
  std::sort(levels.begin(), levels.end());
  std::map<CellKey, std::map<Mhz, const AggregatedPoint*>> cells;
  for (const auto& p : points) {
    if (!p.config.control.lock_mhz) continue;
    cells[{p.config.architecture, p.config.phase, p.config.batch, p.config.context}][*p.config.control.lock_mhz] = &p;
  }
  ClockMap out;
  std::vector<std::string> problems;
  for (const auto& [key, byclock] : cells) {
    std::vector<std::string> missing;
    for (Mhz c : levels)
      if (!byclock.count(c)) missing.push_back(std::to_string(c));
    if (!missing.empty()) {
      problems.push_back(key.architecture + "/" + to_string(key.phase) + " b=" + std::to_string(key.batch) +
                         " ctx=" + std::to_string(key.context) + " missing " + join(missing, ","));
      continue;
    }
    CellChoice choice;
    choice.reference_clock = levels.back();
    for (Mhz c : levels) {
      const auto* p = byclock.at(c);
      choice.samples.push_back({c, p->actual_clock_mhz, p->median_mj_per_tok, p->median_tok_per_s, p->median_power_w,
                                p->config_id});
    }
    const auto& ref = choice.samples.back();
    choice.min_energy_clock = choice.samples.front().lock_mhz;
    double best = choice.samples.front().mj_per_tok;
    for (const auto& s : choice.samples)
      if (s.mj_per_tok < best) {
        best = s.mj_per_tok;
        choice.min_energy_clock = s.lock_mhz;
      }
    choice.budget_clock = ref.lock_mhz;
    for (const auto& s : choice.samples)
      if (1.0 - s.tok_per_s / ref.tok_per_s <= loss_budget) {
        choice.budget_clock = s.lock_mhz;
        break;
      }
    out[key] = choice;
  }
  if (!problems.empty()) throw Error(Errc::incomplete_cell, join(problems, "; "));
  return out;
}

enum class DvfsClassKind { batch_invariant, batch_sensitive, compute_light, unclassified };

inline const char* to_string(DvfsClassKind k) {
  switch (k) {
    case DvfsClassKind::batch_invariant: return "batch_invariant";
    case DvfsClassKind::batch_sensitive: return "batch_sensitive";
    case DvfsClassKind::compute_light: return "compute_light";
    case DvfsClassKind::unclassified: return "unclassified";
  }
  return "unclassified";
}

inline DvfsClassKind dvfs_class_from_string(const std::string& s) {
  for (auto k : {DvfsClassKind::batch_invariant, DvfsClassKind::batch_sensitive, DvfsClassKind::compute_light,
                 DvfsClassKind::unclassified})
    if (s == to_string(k)) return k;
  throw Error(Errc::config_error, "unknown DVFS class '" + s + "'");
}

struct DvfsClass {
  DvfsClassKind kind = DvfsClassKind::unclassified;
  std::vector<std::pair<int, Mhz>> evidence;  // (batch, budget clock), ascending batch
};

/// Rule over indices into the swept clock levels:
///   compute_light   budget clock is the lowest level at every batch;
///   batch_invariant budget clock spans at most one level and stays below the top level;
///   batch_sensitive budget clock rises by two or more levels from the smallest to the largest batch.
inline DvfsClass classify_dvfs(std::vector<std::pair<int, Mhz>> row, std::vector<Mhz> levels) {
  if (row.size() < 2) throw Error(Errc::invalid_argument, "classification needs at least two batch levels");
  std::sort(row.begin(), row.end());
  std::sort(levels.begin(), levels.end());
  auto idx = [&](Mhz c) {
    auto it = std::find(levels.begin(), levels.end(), c);
    if (it == levels.end()) throw Error(Errc::invalid_argument, "clock " + std::to_string(c) + " not a swept level");
    return static_cast<int>(it - levels.begin());
  };
  DvfsClass out;
  out.evidence = row;
  int lo = INT32_MAX, hi = INT32_MIN;
  for (const auto& [b, c] : row) {
    lo = std::min(lo, idx(c));
    hi = std::max(hi, idx(c));
  }
  const int top = static_cast<int>(levels.size()) - 1;
  if (hi == 0)
    out.kind = DvfsClassKind::compute_light;
  else if (hi - lo <= 1 && hi < top)
    out.kind = DvfsClassKind::batch_invariant;
  else if (idx(row.back().second) - idx(row.front().second) >= 2)
    out.kind = DvfsClassKind::batch_sensitive;
  else
    out.kind = DvfsClassKind::unclassified;
  return out;
}

/// Budget-clock row across batches for one (architecture, phase, context).
inline std::vector<std::pair<int, Mhz>> batch_row(const ClockMap& map, const std::string& arch, Phase phase,
                                                  int context) {
  std::vector<std::pair<int, Mhz>> row;
  for (const auto& [key, choice] : map)
    if (key.architecture == arch && key.phase == phase && key.context == context)
      row.emplace_back(key.batch, choice.budget_clock);
  return row;
}

// ---------------------------------------------------------------------------
// Crossovers and total request energy.
// ---------------------------------------------------------------------------

enum class CrossoverAxis { context, output_tokens };

inline const char* to_string(CrossoverAxis a) { return a == CrossoverAxis::context ? "context" : "output_tokens"; }

struct Curve {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct CrossoverReport {
  CrossoverAxis axis = CrossoverAxis::context;
  std::string first;
  std::string second;
  int batch = 0;
  std::optional<double> threshold;
  std::string lower_after;  // which curve is lower beyond the threshold
};

/// First sign change of (a - b) along the shared axis, refined by linear
/// interpolation between the bracketing samples. Symmetric in its arguments.
inline CrossoverReport find_crossover(const Curve& a, const Curve& b, CrossoverAxis axis, int batch = 0) {
  if (a.x.size() != a.y.size() || b.x.size() != b.y.size())
    throw Error(Errc::invalid_argument, "curve x and y lengths differ");
  if (a.x != b.x) throw Error(Errc::axis_mismatch, "curves " + a.label + " and " + b.label + " use different axes");
  if (a.x.size() < 3) throw Error(Errc::invalid_argument, "crossover needs at least three samples");
  CrossoverReport r{axis, a.label, b.label, batch, std::nullopt, ""};
  const auto n = a.x.size();
  auto d = [&](std::size_t i) { return a.y[i] - b.y[i]; };
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double d0 = d(i), d1 = d(i + 1);
    if (d0 == 0.0 && d1 != 0.0 && i > 0 && (d(i - 1) > 0) != (d1 > 0)) {
      r.threshold = a.x[i];
    } else if ((d0 < 0 && d1 > 0) || (d0 > 0 && d1 < 0)) {
      r.threshold = a.x[i] + (a.x[i + 1] - a.x[i]) * d0 / (d0 - d1);
    }
    if (r.threshold) {
      r.lower_after = d1 < 0 ? a.label : b.label;
      return r;
    }
  }
  return r;
}

/// Energy of one complete request per sequence, in joules: the prompt's prefill
/// energy plus `output_len` decode tokens.
inline double total_request_energy(double prefill_mj_per_tok, double decode_mj_per_tok, int context, int output_len) {
  if (output_len < 0) throw Error(Errc::invalid_argument, "output_len must be >= 0");
  return (prefill_mj_per_tok * context + static_cast<double>(output_len) * decode_mj_per_tok) * 1e-3;
}

struct RequestEnergyCurve {
  std::string architecture;
  int batch = 0;
  int context = 0;
  Mhz prefill_clock = 0;
  Mhz decode_clock = 0;
  double prefill_mj_per_tok = 0.0;
  double decode_mj_per_tok = 0.0;
  Curve curve;  // x = output tokens, y = joules per sequence
};

inline RequestEnergyCurve request_energy_curve(const std::string& arch, int batch, int context, Mhz prefill_clock,
                                               Mhz decode_clock, double prefill_mj, double decode_mj,
                                               const std::vector<int>& output_lengths) {
  RequestEnergyCurve c{arch, batch, context, prefill_clock, decode_clock, prefill_mj, decode_mj, {arch, {}, {}}};
  for (int n : output_lengths) {
    c.curve.x.push_back(n);
    c.curve.y.push_back(total_request_energy(prefill_mj, decode_mj, context, n));
  }
  return c;
}

/// Request-energy curve from sweep aggregates: prefill at `prefill_lock`, decode at
/// `decode_lock`, both looked up in the clock map for (arch, batch, context).
inline RequestEnergyCurve request_energy_curve(const ClockMap& map, const std::string& arch, int batch, int context,
                                               Mhz prefill_lock, Mhz decode_lock,
                                               const std::vector<int>& output_lengths) {
  auto cell = [&](Phase ph) -> const CellChoice& {
    auto it = map.find({arch, ph, batch, context});
    if (it == map.end())
      throw Error(Errc::incomplete_cell, "no " + std::string(to_string(ph)) + " cell for " + arch + " b=" +
                                             std::to_string(batch) + " ctx=" + std::to_string(context));
    return it->second;
  };
  return request_energy_curve(arch, batch, context, prefill_lock, decode_lock,
                              cell(Phase::prefill).at(prefill_lock).mj_per_tok,
                              cell(Phase::decode).at(decode_lock).mj_per_tok, output_lengths);
}

inline std::vector<int> default_output_lengths(int max_len = 4096, int step = 64) {
  std::vector<int> out;
  for (int n = 0; n <= max_len; n += step) out.push_back(n);
  return out;
}

// ---------------------------------------------------------------------------
// Adapters from sweep aggregates to detector inputs.
// ---------------------------------------------------------------------------

/// Cap-sweep rows (cap, median actual clock, median power) per cell.
inline std::map<CellKey, std::vector<CapRow>> cap_rows(const std::vector<AggregatedPoint>& points) {
  std::map<CellKey, std::vector<CapRow>> out;
  for (const auto& p : points)
    if (p.config.control.cap_w)
      out[{p.config.architecture, p.config.phase, p.config.batch, p.config.context}].push_back(
          {*p.config.control.cap_w, p.actual_clock_mhz, p.median_power_w});
  return out;
}

/// Distinct (requested lock, observed clock) pairs over all lock aggregates.
inline std::vector<ClockPair> clock_pairs(const std::vector<AggregatedPoint>& points) {
  std::set<std::pair<Mhz, Mhz>> seen;
  for (const auto& p : points)
    if (p.config.control.lock_mhz) seen.insert({*p.config.control.lock_mhz, p.actual_clock_mhz});
  std::vector<ClockPair> out;
  for (const auto& [r, a] : seen) out.push_back({r, a});
  return out;
}

/// DVFS class per architecture from the decode row at `context` (the smallest swept
/// context when absent).
inline std::map<std::string, DvfsClass> classify_all(const ClockMap& map, const std::vector<Mhz>& levels,
                                                     std::optional<int> context = std::nullopt) {
  std::map<std::string, int> ctx;
  for (const auto& [k, _] : map)
    if (k.phase == Phase::decode) {
      auto it = ctx.find(k.architecture);
      if (it == ctx.end() || k.context < it->second) ctx[k.architecture] = k.context;
    }
  std::map<std::string, DvfsClass> out;
  for (const auto& [arch, smallest] : ctx) {
    const auto row = batch_row(map, arch, Phase::decode, context.value_or(smallest));
    if (row.size() < 2) {
      out[arch] = DvfsClass{DvfsClassKind::unclassified, row};
      continue;
    }
    out[arch] = classify_dvfs(row, levels);
  }
  return out;
}

/// Decode energy-per-token curve over context at a fixed lock and batch.
inline Curve context_curve(const ClockMap& map, const std::string& arch, int batch, Mhz lock) {
  Curve c{arch, {}, {}};
  for (const auto& [k, cell] : map)
    if (k.architecture == arch && k.phase == Phase::decode && k.batch == batch) {
      c.x.push_back(k.context);
      c.y.push_back(cell.at(lock).mj_per_tok);
    }
  return c;
}

}  // namespace phasewatt
