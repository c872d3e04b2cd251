// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasewatt/detail/nelder_mead.hpp"
#include "phasewatt/device.hpp"
#include "phasewatt/error.hpp"
#include "phasewatt/util.hpp"

namespace phasewatt {

/// Phase-aggregate workload coefficients for one attention architecture.
///
/// Decode step compute is `decode_step_flops + batch * (decode_flops_per_token +
/// decode_flops_per_context_token * context)`, executed at `decode_utilization` of
/// peak. The batch-independent part models weight GEMV work whose latency does not
/// grow with batch in the small-batch regime. Overheads are wall time that does
/// not depend on the SM clock (launch gaps, MLA latent decompression).
struct ArchitectureProfile {
  std::string name;

  double weight_bytes = 0.0;        // streamed once per decode step
  double kv_bytes_per_token = 0.0;  // uncompressed KV bytes per cached token
  double kv_compression = 1.0;
  double state_bytes = 0.0;  // per-sequence recurrent state traffic per step
  double bandwidth_efficiency = 1.0;

  double decode_step_flops = 0.0;
  double decode_flops_per_token = 0.0;
  double decode_flops_per_context_token = 0.0;
  double decode_utilization = 1.0;
  double overhead_seconds_per_step = 0.0;
  double overhead_seconds_per_sequence = 0.0;
  double overhead_seconds_per_context_token = 0.0;  // per sequence, per cached token
  double power_batch_gain = 0.0;                    // utilization scale growth per batch doubling

  double prefill_flops_per_token = 0.0;
  double prefill_flops_per_context_token = 0.0;  // causal attention, averaged over the prompt
  double prefill_utilization = 1.0;
  double prefill_overhead_seconds = 0.0;

  double elementwise_fraction = 0.0;
  double tc_utilization = 0.0;

  std::vector<std::string> fit_parameters;

  bool recurrent() const noexcept { return kv_bytes_per_token == 0.0; }

  void validate() const {
    auto fail = [&](const std::string& why) { throw Error(Errc::config_error, "profile " + name + ": " + why); };
    if (name.empty()) fail("missing name");
    if (kv_compression < 1.0) fail("kv_compression must be >= 1");
    if (recurrent() && !(state_bytes > 0.0)) fail("recurrent profile needs state_bytes > 0");
    for (double v : {weight_bytes, kv_bytes_per_token, state_bytes, decode_step_flops, decode_flops_per_token,
                     decode_flops_per_context_token, overhead_seconds_per_step, overhead_seconds_per_sequence,
                     overhead_seconds_per_context_token, power_batch_gain, prefill_flops_per_token,
                     prefill_flops_per_context_token, prefill_overhead_seconds, elementwise_fraction, tc_utilization})
      if (v < 0.0 || !std::isfinite(v)) fail("coefficients must be finite and non-negative");
    for (double u : {bandwidth_efficiency, decode_utilization, prefill_utilization})
      if (!(u > 0.0 && u <= 1.0)) fail("efficiencies must lie in (0, 1]");
  }
};

namespace detail {

struct ProfileField {
  const char* key;
  double ArchitectureProfile::*member;
};

inline const std::vector<ProfileField>& profile_fields() {
  static const std::vector<ProfileField> fields{
      {"weight_bytes", &ArchitectureProfile::weight_bytes},
      {"kv_bytes_per_token", &ArchitectureProfile::kv_bytes_per_token},
      {"kv_compression", &ArchitectureProfile::kv_compression},
      {"state_bytes", &ArchitectureProfile::state_bytes},
      {"bandwidth_efficiency", &ArchitectureProfile::bandwidth_efficiency},
      {"decode_step_flops", &ArchitectureProfile::decode_step_flops},
      {"decode_flops_per_token", &ArchitectureProfile::decode_flops_per_token},
      {"decode_flops_per_context_token", &ArchitectureProfile::decode_flops_per_context_token},
      {"decode_utilization", &ArchitectureProfile::decode_utilization},
      {"overhead_seconds_per_step", &ArchitectureProfile::overhead_seconds_per_step},
      {"overhead_seconds_per_sequence", &ArchitectureProfile::overhead_seconds_per_sequence},
      {"overhead_seconds_per_context_token", &ArchitectureProfile::overhead_seconds_per_context_token},
      {"power_batch_gain", &ArchitectureProfile::power_batch_gain},
      {"prefill_flops_per_token", &ArchitectureProfile::prefill_flops_per_token},
      {"prefill_flops_per_context_token", &ArchitectureProfile::prefill_flops_per_context_token},
      {"prefill_utilization", &ArchitectureProfile::prefill_utilization},
      {"prefill_overhead_seconds", &ArchitectureProfile::prefill_overhead_seconds},
      {"elementwise_fraction", &ArchitectureProfile::elementwise_fraction},
      {"tc_utilization", &ArchitectureProfile::tc_utilization},
  };
  return fields;
}

inline double ArchitectureProfile::*field_member(const std::string& key) {
  for (const auto& f : profile_fields())
    if (key == f.key) return f.member;
  throw Error(Errc::config_error, "unknown profile coefficient '" + key + "'");
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ArchitectureProfile& p) {
  j = nlohmann::json::object();
  j["name"] = p.name;
  for (const auto& f : detail::profile_fields()) j[f.key] = p.*(f.member);
  j["fit_parameters"] = p.fit_parameters;
}

inline void from_json(const nlohmann::json& j, ArchitectureProfile& p) {
  p = ArchitectureProfile{};
  p.name = j.at("name").get<std::string>();
  for (const auto& f : detail::profile_fields())
    if (j.contains(f.key)) p.*(f.member) = j.at(f.key).get<double>();
  p.fit_parameters = j.value("fit_parameters", std::vector<std::string>{});
  for (const auto& k : p.fit_parameters) detail::field_member(k);
  p.validate();
}

using ProfileSet = std::map<std::string, ArchitectureProfile>;

inline const ArchitectureProfile& find_profile(const ProfileSet& set, const std::string& name) {
  auto it = set.find(name);
  if (it == set.end()) throw Error(Errc::unknown_architecture, "no profile for architecture '" + name + "'");
  return it->second;
}

inline ProfileSet profiles_from_json(const nlohmann::json& j) {
  ProfileSet out;
  for (const auto& e : j.at("profiles")) {
    auto p = e.get<ArchitectureProfile>();
    out[p.name] = p;
  }
  return out;
}

inline nlohmann::json profiles_to_json(const ProfileSet& set) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [_, p] : set) arr.push_back(p);
  return nlohmann::json{{"profiles", arr}};
}

struct PhasePoint {
  Phase phase = Phase::decode;
  int batch = 1;
  int context = 1;     // tokens cached (decode) or prompt length (prefill)
  int output_len = 0;  // decode steps per run

  void validate() const {
    if (batch < 1) throw Error(Errc::invalid_argument, "batch must be >= 1");
    if (context < 1) throw Error(Errc::invalid_argument, "context must be >= 1");
    if (output_len < 0) throw Error(Errc::invalid_argument, "output_len must be >= 0");
  }
};

enum class Roofline { memory_bound, compute_bound };

inline const char* to_string(Roofline r) { return r == Roofline::memory_bound ? "memory_bound" : "compute_bound"; }

inline double arithmetic_intensity(double flops, double bytes) {
  if (bytes == 0.0) throw Error(Errc::division_by_zero, "arithmetic intensity with zero bytes");
  return flops / bytes;
}

inline Roofline classify_roofline(double intensity, const DeviceSpec& spec) {
  return intensity < spec.ridge_intensity ? Roofline::memory_bound : Roofline::compute_bound;
}

/// HBM bytes moved by one decode step.
inline double decode_step_traffic(const ArchitectureProfile& p, const PhasePoint& pt) {
  if (pt.phase != Phase::decode) throw Error(Errc::invalid_argument, "decode_step_traffic needs a decode point");
  const double b = pt.batch;
  return p.weight_bytes + b * (p.kv_bytes_per_token * pt.context / p.kv_compression) + b * p.state_bytes;
}

/// HBM bytes for one step of the given phase (a prefill step is the whole prompt pass).
inline double phase_traffic(const ArchitectureProfile& p, const PhasePoint& pt) {
  if (pt.phase == Phase::decode) return decode_step_traffic(p, pt);
  const double b = pt.batch;
  return p.weight_bytes + b * pt.context * p.kv_bytes_per_token / p.kv_compression + b * p.state_bytes;
}

inline double phase_flops(const ArchitectureProfile& p, const PhasePoint& pt) {
  const double b = pt.batch;
  const double ctx = pt.context;
  if (pt.phase == Phase::decode)
    return p.decode_step_flops + b * (p.decode_flops_per_token + p.decode_flops_per_context_token * ctx);
  return b * ctx * (p.prefill_flops_per_token + p.prefill_flops_per_context_token * ctx / 2.0);
}

struct StepTiming {
  double compute_s = 0.0;
  double memory_s = 0.0;
  double overhead_s = 0.0;
  double total_s = 0.0;
};

inline StepTiming step_timing(const ArchitectureProfile& p, const PhasePoint& pt, double clock_mhz,
                              const DeviceSpec& spec) {
  if (clock_mhz < spec.min_clock_mhz || clock_mhz > spec.boost_clock_mhz)
    throw Error(Errc::unsupported_clock, "clock " + format_double(clock_mhz) + " MHz outside device range");
  const bool decode = pt.phase == Phase::decode;
  const double util = decode ? p.decode_utilization : p.prefill_utilization;
  StepTiming t;
  t.compute_s = phase_flops(p, pt) / (spec.peak_compute_flops * util * clock_mhz / spec.base_clock_mhz);
  t.memory_s = phase_traffic(p, pt) / (spec.hbm_bandwidth_bytes_per_s * p.bandwidth_efficiency);
  t.overhead_s = decode ? p.overhead_seconds_per_step +
                              pt.batch * (p.overhead_seconds_per_sequence +
                                          p.overhead_seconds_per_context_token * pt.context)
                        : p.prefill_overhead_seconds;
  t.total_s = std::max(t.compute_s, t.memory_s) + t.overhead_s;
  return t;
}

/// Wall time of one step: the roofline max of compute and memory time plus the
/// clock-insensitive overhead.
inline double step_time(const ArchitectureProfile& p, const PhasePoint& pt, double clock_mhz,
                        const DeviceSpec& spec) {
  return step_timing(p, pt, clock_mhz, spec).total_s;
}

inline double tokens_per_step(const PhasePoint& pt) {
  return pt.phase == Phase::decode ? static_cast<double>(pt.batch)
                                   : static_cast<double>(pt.batch) * static_cast<double>(pt.context);
}

inline double utilization_scale(const ArchitectureProfile& p, const PhasePoint& pt) {
  if (pt.phase == Phase::prefill) return 1.0;
  return 1.0 + p.power_batch_gain * std::log2(static_cast<double>(pt.batch));
}

/// Lowest honoured clock whose step time stays within (1 + loss_budget) of the
/// base-clock step time; the base clock when nothing lower qualifies.
inline Mhz memory_pace_clock(const ArchitectureProfile& p, const PhasePoint& pt, const DeviceSpec& spec,
                             double loss_budget) {
  if (!(loss_budget > 0.0)) throw Error(Errc::invalid_argument, "loss budget must be positive");
  const double ref = step_time(p, pt, spec.base_clock_mhz, spec);
  for (Mhz c : spec.honoured_levels())
    if (step_time(p, pt, c, spec) <= (1.0 + loss_budget) * ref) return c;
  return spec.base_clock_mhz;
}

/// Noise-free model predictions at one operating point.
struct Prediction {
  double step_s = 0.0;
  double power_w = 0.0;
  double mj_per_tok = 0.0;
  double tok_per_s = 0.0;
};

inline Prediction predict(const DeviceSpec& spec, const PowerModelParams& power, const ArchitectureProfile& p,
                          const PhasePoint& pt, double clock_mhz) {
  Prediction out;
  out.step_s = step_time(p, pt, clock_mhz, spec);
  out.power_w = simulated_power(spec, power, p.name, pt.phase, clock_mhz, utilization_scale(p, pt));
  const double tokens = tokens_per_step(pt);
  out.mj_per_tok = out.power_w * out.step_s / tokens * 1e3;
  out.tok_per_s = tokens / out.step_s;
  return out;
}

// ---------------------------------------------------------------------------
// Profile fitting against reference calibration targets.
// ---------------------------------------------------------------------------

enum class TargetMetric { mj_per_tok, tok_per_s, step_ms, power_w };

struct CalibrationTarget {
  std::string architecture;
  std::string quantity;  // e.g. "decode_mj_per_tok:b=32:ctx=4096:clk=1830"
  double value = 0.0;
  double tolerance = 0.0;  // absolute, in the quantity's unit
  std::string source_tag;

  TargetMetric metric = TargetMetric::mj_per_tok;
  PhasePoint point;
  Mhz clock_mhz = 0;
};

/// Parses the operating point encoded in a target quantity string.
inline void parse_target_quantity(CalibrationTarget& t) {
  const auto parts = split(t.quantity, ':');
  const std::string& head = parts.front();
  const auto us = head.find('_');
  if (us == std::string::npos) throw Error(Errc::config_error, "bad target quantity '" + t.quantity + "'");
  t.point.phase = phase_from_string(head.substr(0, us));
  const std::string metric = head.substr(us + 1);
  if (metric == "mj_per_tok")
    t.metric = TargetMetric::mj_per_tok;
  else if (metric == "tok_per_s")
    t.metric = TargetMetric::tok_per_s;
  else if (metric == "step_ms")
    t.metric = TargetMetric::step_ms;
  else if (metric == "power_w")
    t.metric = TargetMetric::power_w;
  else
    throw Error(Errc::config_error, "unknown target metric '" + metric + "'");
  bool has_b = false, has_ctx = false, has_clk = false;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto kv = split(parts[i], '=');
    if (kv.size() != 2) throw Error(Errc::config_error, "bad target qualifier '" + parts[i] + "'");
    const auto v = parse_int(kv[1], kv[0]);
    if (kv[0] == "b") {
      t.point.batch = static_cast<int>(v);
      has_b = true;
    } else if (kv[0] == "ctx") {
      t.point.context = static_cast<int>(v);
      has_ctx = true;
    } else if (kv[0] == "clk") {
      t.clock_mhz = static_cast<Mhz>(v);
      has_clk = true;
    } else {
      throw Error(Errc::config_error, "unknown target qualifier '" + kv[0] + "'");
    }
  }
  if (!has_b || !has_ctx || !has_clk)
    throw Error(Errc::config_error, "target '" + t.quantity + "' needs b=, ctx= and clk= qualifiers");
  t.point.output_len = 1;
}

/// Target CSV: header `arch,quantity,value,tolerance,source_tag`.
inline std::vector<CalibrationTarget> read_targets_csv(std::istream& is) {
  std::vector<CalibrationTarget> out;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto cols = split(t, ',');
    if (!header) {
      if (cols.size() < 5 || cols[0] != "arch" || cols[1] != "quantity" || cols[2] != "value" ||
          cols[3] != "tolerance" || cols[4] != "source_tag")
        throw Error(Errc::config_error, "target CSV header must be arch,quantity,value,tolerance,source_tag");
      header = true;
      continue;
    }
    if (cols.size() < 5) throw Error(Errc::config_error, "target CSV row has fewer than 5 columns: " + t);
    CalibrationTarget ct;
    ct.architecture = cols[0];
    ct.quantity = cols[1];
    ct.value = parse_double(cols[2], "value");
    ct.tolerance = parse_double(cols[3], "tolerance");
    // source tags may contain commas; re-join the tail
    std::vector<std::string> tail(cols.begin() + 4, cols.end());
    ct.source_tag = join(tail, ",");
    parse_target_quantity(ct);
    out.push_back(ct);
  }
  return out;
}

inline double evaluate_target(const DeviceSpec& spec, const PowerModelParams& power, const ArchitectureProfile& p,
                              const CalibrationTarget& t) {
  const auto pr = predict(spec, power, p, t.point, t.clock_mhz);
  switch (t.metric) {
    case TargetMetric::mj_per_tok: return pr.mj_per_tok;
    case TargetMetric::tok_per_s: return pr.tok_per_s;
    case TargetMetric::step_ms: return pr.step_s * 1e3;
    case TargetMetric::power_w: return pr.power_w;
  }
  return 0.0;
}

struct TargetResidual {
  CalibrationTarget target;
  double fitted = 0.0;
  double residual = 0.0;  // fitted - value
  bool within_tolerance = false;
};

struct ProfileFit {
  ProfileSet profiles;
  std::vector<TargetResidual> residuals;
  std::vector<std::string> conflicts;  // targets the fit could not meet
};

/// Fits each profile's declared `fit_parameters` to its targets by minimising the
/// summed squared relative error. Parameters are optimised in log space, which
/// keeps them positive; a target that would need a negative coefficient therefore
/// shows up as an unmet tolerance. Deterministic: fixed initial simplex from the
/// seed values and a fixed number of restarts.
inline ProfileFit fit_profiles_report(const DeviceSpec& spec, const PowerModelParams& power, const ProfileSet& seeds,
                                      const std::vector<CalibrationTarget>& targets) {
  ProfileFit out;
  out.profiles = seeds;
  for (const auto& t : targets)
    if (!seeds.count(t.architecture))
      throw Error(Errc::unknown_architecture, "target for unknown architecture '" + t.architecture + "'");

  for (auto& [name, profile] : out.profiles) {
    std::vector<const CalibrationTarget*> mine;
    for (const auto& t : targets)
      if (t.architecture == name) mine.push_back(&t);
    if (mine.empty() || profile.fit_parameters.empty()) continue;
    if (mine.size() < profile.fit_parameters.size())
      throw Error(Errc::underdetermined_fit, name + " has " + std::to_string(mine.size()) + " target(s) for " +
                                                 std::to_string(profile.fit_parameters.size()) + " free coefficient(s)");

    std::vector<double ArchitectureProfile::*> members;
    std::vector<double> x0;
    for (const auto& k : profile.fit_parameters) {
      members.push_back(detail::field_member(k));
      const double seed = profile.*(members.back());
      if (!(seed > 0.0)) throw Error(Errc::config_error, name + ": fit parameter " + k + " needs a positive seed");
      x0.push_back(std::log(seed));
    }

    auto apply = [&](ArchitectureProfile& prof, const std::vector<double>& x) {
      for (std::size_t i = 0; i < members.size(); ++i) prof.*(members[i]) = std::exp(x[i]);
    };
    auto objective = [&](const std::vector<double>& x) {
      ArchitectureProfile trial = profile;
      apply(trial, x);
      for (double u : {trial.bandwidth_efficiency, trial.decode_utilization, trial.prefill_utilization})
        if (u > 1.0) return 1e12 * u;
      double sum = 0.0;
      for (auto* t : mine) {
        const double r = (evaluate_target(spec, power, trial, *t) - t->value) / t->value;
        sum += r * r;
      }
      return sum;
    };

    auto res = detail::nelder_mead(objective, x0, 0.2);
    for (int restart = 0; restart < 3; ++restart) res = detail::nelder_mead(objective, res.x, 0.05);
    apply(profile, res.x);
    profile.validate();
  }

  for (const auto& t : targets) {
    const auto& p = out.profiles.at(t.architecture);
    TargetResidual r{t, evaluate_target(spec, power, p, t), 0.0, false};
    r.residual = r.fitted - t.value;
    r.within_tolerance = std::abs(r.residual) <= t.tolerance;
    if (!r.within_tolerance)
      out.conflicts.push_back(t.architecture + " " + t.quantity + ": target " + format_double(t.value) + " +/- " +
                              format_double(t.tolerance) + ", best fit " + format_double(r.fitted) + " [" +
                              t.source_tag + "]");
    out.residuals.push_back(r);
  }
  return out;
}

/// As fit_profiles_report, but raises CalibrationConflict when any target is unmet.
inline ProfileFit fit_profiles(const DeviceSpec& spec, const PowerModelParams& power, const ProfileSet& seeds,
                               const std::vector<CalibrationTarget>& targets) {
  auto fit = fit_profiles_report(spec, power, seeds, targets);
  if (!fit.conflicts.empty()) {
    std::vector<std::string> lines = fit.conflicts;
    throw Error(Errc::calibration_conflict, "targets not simultaneously satisfiable:\n  " + join(lines, "\n  "));
  }
  return fit;
}

}  // namespace phasewatt
