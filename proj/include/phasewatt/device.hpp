// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasewatt/error.hpp"
#include "phasewatt/telemetry.hpp"
#include "phasewatt/util.hpp"

namespace phasewatt {

using Mhz = int;

struct DeviceSpec {
  std::string name = "H200-SXM";
  double tdp_w = 700.0;
  double hbm_bandwidth_bytes_per_s = 4.8e12;
  double peak_compute_flops = 989e12;  // BF16 dense, at the base clock
  double idle_power_w = 75.0;
  Mhz base_clock_mhz = 1830;
  Mhz boost_clock_mhz = 1980;
  Mhz min_clock_mhz = 390;
  std::vector<Mhz> supported_locks_mhz{390, 780, 1185, 1590, 1830, 1980};
  double ridge_intensity = 206.0;  // FLOPs/byte
  double min_cap_w = 100.0;

  void validate() const {
    if (!(min_clock_mhz < base_clock_mhz && base_clock_mhz < boost_clock_mhz))
      throw Error(Errc::config_error, "device clocks must satisfy min < base < boost");
    if (supported_locks_mhz.empty() || !std::is_sorted(supported_locks_mhz.begin(), supported_locks_mhz.end()))
      throw Error(Errc::config_error, "supported locks must be a non-empty ascending list");
    if (boost_clock_mhz > supported_locks_mhz.back())
      throw Error(Errc::config_error, "boost clock exceeds the highest supported lock");
    const double ridge = peak_compute_flops / hbm_bandwidth_bytes_per_s;
    if (std::abs(ridge - ridge_intensity) > 0.05 * ridge)
      throw Error(Errc::config_error, "ridge intensity " + format_double(ridge_intensity) +
                                          " disagrees with peak/bandwidth " + format_double(ridge));
    if (min_cap_w < idle_power_w) throw Error(Errc::config_error, "minimum cap below idle power");
  }

  /// Clocks a lock request can actually produce, ascending (clamped requests fold into base).
  std::vector<Mhz> honoured_levels() const {
    std::vector<Mhz> out;
    for (Mhz c : supported_locks_mhz)
      if (c < base_clock_mhz) out.push_back(c);
    out.push_back(base_clock_mhz);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const DeviceSpec& d) {
  j = nlohmann::json{{"name", d.name},
                     {"tdp_w", d.tdp_w},
                     {"hbm_bandwidth_bytes_per_s", d.hbm_bandwidth_bytes_per_s},
                     {"peak_compute_flops", d.peak_compute_flops},
                     {"idle_power_w", d.idle_power_w},
                     {"base_clock_mhz", d.base_clock_mhz},
                     {"boost_clock_mhz", d.boost_clock_mhz},
                     {"min_clock_mhz", d.min_clock_mhz},
                     {"supported_locks_mhz", d.supported_locks_mhz},
                     {"ridge_intensity", d.ridge_intensity},
                     {"min_cap_w", d.min_cap_w}};
}

inline void from_json(const nlohmann::json& j, DeviceSpec& d) {
  d = DeviceSpec{};
  d.name = j.value("name", d.name);
  d.tdp_w = j.value("tdp_w", d.tdp_w);
  d.hbm_bandwidth_bytes_per_s = j.value("hbm_bandwidth_bytes_per_s", d.hbm_bandwidth_bytes_per_s);
  d.peak_compute_flops = j.value("peak_compute_flops", d.peak_compute_flops);
  d.idle_power_w = j.value("idle_power_w", d.idle_power_w);
  d.base_clock_mhz = j.value("base_clock_mhz", d.base_clock_mhz);
  d.boost_clock_mhz = j.value("boost_clock_mhz", d.boost_clock_mhz);
  d.min_clock_mhz = j.value("min_clock_mhz", d.min_clock_mhz);
  d.supported_locks_mhz = j.value("supported_locks_mhz", d.supported_locks_mhz);
  d.ridge_intensity = j.value("ridge_intensity", d.ridge_intensity);
  d.min_cap_w = j.value("min_cap_w", d.min_cap_w);
  d.validate();
}

/// Control state of one device. `requested_lock` and `configured_cap_w` hold what
/// the operator asked for; `actual_clock_mhz` is what the firmware runs at.
struct DvfsState {
  std::optional<Mhz> requested_lock_mhz;
  std::optional<double> configured_cap_w;
  Mhz actual_clock_mhz = 0;
  bool cap_engaged = false;
  bool cap_floor_reached = false;  // cap below the lowest achievable draw
  bool throttled = false;          // firmware throttle artefact active

  bool free_running() const noexcept { return !requested_lock_mhz && !configured_cap_w; }
  bool operator==(const DvfsState&) const = default;
};

inline DvfsState free_running_state(const DeviceSpec& spec) {
  DvfsState s;
  s.actual_clock_mhz = spec.boost_clock_mhz;
  return s;
}

/// Lock semantics of the firmware: requests at or above the base clock are
/// clamped to it, anything below is honoured exactly.
inline DvfsState apply_clock_lock(const DeviceSpec& spec, Mhz request) {
  if (request < spec.min_clock_mhz || request > spec.boost_clock_mhz)
    throw Error(Errc::unsupported_clock, "lock " + std::to_string(request) + " MHz outside [" +
                                             std::to_string(spec.min_clock_mhz) + ", " +
                                             std::to_string(spec.boost_clock_mhz) + "]");
  DvfsState s;
  s.requested_lock_mhz = request;
  s.actual_clock_mhz = std::min(request, spec.base_clock_mhz);
  return s;
}

struct PowerTerms {
  double mem_static_w = 0.0;      // clock-independent dynamic draw (HBM, data movement)
  double sm_dynamic_ref_w = 0.0;  // SM dynamic draw at the base clock
  double clock_exponent = 1.0;
};

/// Per (architecture, phase) power decomposition.
class PowerModelParams {
 public:
  void set(const std::string& arch, Phase phase, PowerTerms terms) { terms_[{arch, phase}] = terms; }

  const PowerTerms& at(const std::string& arch, Phase phase) const {
    auto it = terms_.find({arch, phase});
    if (it == terms_.end())
      throw Error(Errc::unknown_architecture,
                  "no power terms for " + arch + "/" + std::string(to_string(phase)));
    return it->second;
  }

  bool contains(const std::string& arch, Phase phase) const { return terms_.count({arch, phase}) > 0; }
  const std::map<std::pair<std::string, Phase>, PowerTerms>& all() const noexcept { return terms_; }

  void validate(const DeviceSpec& spec) const {
    for (const auto& [key, t] : terms_) {
      if (t.mem_static_w < 0 || t.sm_dynamic_ref_w < 0 || t.clock_exponent <= 0)
        throw Error(Errc::config_error, "negative power term for " + key.first);
      if (spec.idle_power_w + t.mem_static_w + t.sm_dynamic_ref_w > 1.2 * spec.tdp_w)
        throw Error(Errc::config_error, "power terms for " + key.first + " exceed 1.2x TDP");
    }
  }

  bool operator==(const PowerModelParams& o) const {
    if (terms_.size() != o.terms_.size()) return false;
    for (const auto& [k, t] : terms_) {
      auto it = o.terms_.find(k);
      if (it == o.terms_.end() || it->second.mem_static_w != t.mem_static_w ||
          it->second.sm_dynamic_ref_w != t.sm_dynamic_ref_w || it->second.clock_exponent != t.clock_exponent)
        return false;
    }
    return true;
  }

 private:
  std::map<std::pair<std::string, Phase>, PowerTerms> terms_;
};

inline void to_json(nlohmann::json& j, const PowerModelParams& p) {
  j = nlohmann::json::array();
  for (const auto& [key, t] : p.all())
    j.push_back({{"architecture", key.first},
                 {"phase", to_string(key.second)},
                 {"mem_static_w", t.mem_static_w},
                 {"sm_dynamic_ref_w", t.sm_dynamic_ref_w},
                 {"clock_exponent", t.clock_exponent}});
}

inline void from_json(const nlohmann::json& j, PowerModelParams& p) {
  p = PowerModelParams{};
  for (const auto& e : j)
    p.set(e.at("architecture").get<std::string>(), phase_from_string(e.at("phase").get<std::string>()),
          PowerTerms{e.at("mem_static_w").get<double>(), e.at("sm_dynamic_ref_w").get<double>(),
                     e.value("clock_exponent", 1.0)});
}

/// Board power of a loaded device: idle floor plus a clock-independent memory-side
/// term and an SM term proportional to (clock / base)^exponent, both scaled by load.
inline double simulated_power(const DeviceSpec& spec, const PowerTerms& terms, double clock_mhz,
                              double utilization_scale) {
  const double rel = clock_mhz / static_cast<double>(spec.base_clock_mhz);
  return spec.idle_power_w +
         utilization_scale * (terms.mem_static_w + terms.sm_dynamic_ref_w * std::pow(rel, terms.clock_exponent));
}

inline double simulated_power(const DeviceSpec& spec, const PowerModelParams& params, const std::string& arch,
                              Phase phase, double clock_mhz, double utilization_scale) {
  return simulated_power(spec, params.at(arch, phase), clock_mhz, utilization_scale);
}

/// Resolves a configured power cap against the modelled draw. An inert cap leaves
/// the state untouched; an engaged cap steps the clock down through the supported
/// locks until the draw fits, bottoming out at the lowest lock.
inline DvfsState cap_resolution(const DeviceSpec& spec, const PowerTerms& terms, const DvfsState& state,
                                double utilization_scale) {
  if (!state.configured_cap_w) throw Error(Errc::invalid_argument, "cap_resolution needs a configured cap");
  const double cap = *state.configured_cap_w;
  DvfsState out = state;
  out.cap_engaged = false;
  out.cap_floor_reached = false;
  if (simulated_power(spec, terms, state.actual_clock_mhz, utilization_scale) <= cap) return out;

  out.cap_engaged = true;
  const auto& locks = spec.supported_locks_mhz;
  for (auto it = locks.rbegin(); it != locks.rend(); ++it) {
    if (*it >= state.actual_clock_mhz) continue;
    if (simulated_power(spec, terms, *it, utilization_scale) <= cap) {
      out.actual_clock_mhz = *it;
      return out;
    }
  }
  out.actual_clock_mhz = locks.front();
  out.cap_floor_reached = true;
  return out;
}

/// Firmware throttle artefact: with the given probability the clock drops one
/// supported level for the run, independent of any cap. Deterministic per seed.
inline DvfsState throttle_artefact(const DeviceSpec& spec, const DvfsState& state, std::uint64_t seed,
                                   double probability) {
  if (!(probability >= 0.0 && probability <= 1.0))
    throw Error(Errc::invalid_argument, "throttle probability must lie in [0, 1]");
  if (probability == 0.0) return state;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (!(u(rng) < probability)) return state;
  DvfsState out = state;
  const auto& locks = spec.supported_locks_mhz;
  for (auto it = locks.rbegin(); it != locks.rend(); ++it) {
    if (*it < state.actual_clock_mhz) {
      out.actual_clock_mhz = *it;
      out.throttled = true;
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Calibration of the power decomposition from observed fixtures.
// ---------------------------------------------------------------------------

struct PowerFixture {
  std::string architecture;
  Phase phase = Phase::decode;
  int batch = 1;
  Mhz clock_mhz = 0;
  double power_w = 0.0;
  double utilization_scale = 1.0;
};

struct PowerResidual {
  PowerFixture fixture;
  double fitted_w = 0.0;
  double residual_w = 0.0;  // fitted - observed
};

struct PowerCalibration {
  PowerModelParams params;
  std::vector<PowerResidual> residuals;
};

/// Least-squares fit of (mem_static, sm_dynamic_ref) per (architecture, phase) with
/// the idle floor fixed and the clock exponent at 1. Both terms are constrained to
/// be non-negative; when the unconstrained optimum has a negative term the fit is
/// repeated with that term pinned at zero.
inline PowerCalibration calibrate(const DeviceSpec& spec, const std::vector<PowerFixture>& fixtures) {
  std::map<std::pair<std::string, Phase>, std::vector<const PowerFixture*>> groups;
  for (const auto& f : fixtures) groups[{f.architecture, f.phase}].push_back(&f);
  if (groups.empty()) throw Error(Errc::underdetermined_fit, "no power fixtures");

  PowerCalibration out;
  for (const auto& [key, rows] : groups) {
    std::vector<Mhz> clocks;
    for (auto* r : rows) clocks.push_back(r->clock_mhz);
    std::sort(clocks.begin(), clocks.end());
    clocks.erase(std::unique(clocks.begin(), clocks.end()), clocks.end());
    if (clocks.size() < 2)
      throw Error(Errc::underdetermined_fit, key.first + "/" + to_string(key.second) + " has fixtures at " +
                                                 std::to_string(clocks.size()) + " distinct clock(s); need 2");

    // y = u*m + u*x*s, x = clock/base
    double a11 = 0, a12 = 0, a22 = 0, b1 = 0, b2 = 0;
    for (auto* r : rows) {
      const double u = r->utilization_scale;
      const double x = static_cast<double>(r->clock_mhz) / spec.base_clock_mhz;
      const double y = r->power_w - spec.idle_power_w;
      a11 += u * u;
      a12 += u * u * x;
      a22 += u * u * x * x;
      b1 += u * y;
      b2 += u * x * y;
    }
    const double det = a11 * a22 - a12 * a12;
    double m = (b1 * a22 - b2 * a12) / det;
    double s = (a11 * b2 - a12 * b1) / det;
    if (s < 0) {
      s = 0;
      m = std::max(0.0, b1 / a11);
    } else if (m < 0) {
      m = 0;
      s = std::max(0.0, b2 / a22);
    }
    PowerTerms terms{m, s, 1.0};
    out.params.set(key.first, key.second, terms);
    for (auto* r : rows) {
      const double fitted = simulated_power(spec, terms, r->clock_mhz, r->utilization_scale);
      out.residuals.push_back({*r, fitted, fitted - r->power_w});
    }
  }
  try {
    out.params.validate(spec);
  } catch (const Error& e) {
    throw Error(Errc::calibration_conflict, e.what());
  }
  return out;
}

/// Fixture CSV: header `arch,phase,batch,clock_mhz,power_w`; '#' lines are comments.
inline std::vector<PowerFixture> read_power_fixtures_csv(std::istream& is) {
  std::vector<PowerFixture> out;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto cols = split(t, ',');
    if (!header) {
      if (cols.size() < 5 || cols[0] != "arch" || cols[1] != "phase" || cols[2] != "batch" ||
          cols[3] != "clock_mhz" || cols[4] != "power_w")
        throw Error(Errc::config_error, "fixture CSV header must be arch,phase,batch,clock_mhz,power_w");
      header = true;
      continue;
    }
    if (cols.size() < 5) throw Error(Errc::config_error, "fixture CSV row has fewer than 5 columns: " + t);
    PowerFixture f;
    f.architecture = cols[0];
    f.phase = phase_from_string(cols[1]);
    f.batch = static_cast<int>(parse_int(cols[2], "batch"));
    f.clock_mhz = static_cast<Mhz>(parse_int(cols[3], "clock_mhz"));
    f.power_w = parse_double(cols[4], "power_w");
    out.push_back(f);
  }
  return out;
}

}  // namespace phasewatt
