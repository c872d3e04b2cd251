// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "phasewatt/error.hpp"
#include "phasewatt/util.hpp"

namespace phasewatt {

enum class Phase { prefill, decode };

inline const char* to_string(Phase p) { return p == Phase::prefill ? "prefill" : "decode"; }

inline Phase phase_from_string(const std::string& s) {
  if (s == "prefill") return Phase::prefill;
  if (s == "decode") return Phase::decode;
  throw Error(Errc::config_error, "unknown phase '" + s + "'");
}

struct PowerSample {
  double timestamp_s = 0.0;  // monotonic, relative to the run epoch
  double power_w = 0.0;
  double sm_clock_mhz = 0.0;
  double temperature_c = 0.0;
};

/// Board-power timeseries for one experiment window. Built by a single writer
/// (the sampler) and read-only afterwards.
class PowerTrace {
 public:
  explicit PowerTrace(double nominal_cadence_s = 0.050) : cadence_(nominal_cadence_s) {}

  /// Appends a sample; timestamps must be strictly increasing.
  void append(const PowerSample& s) {
    if (!samples_.empty() && !(s.timestamp_s > samples_.back().timestamp_s))
      throw Error(Errc::invalid_argument, "trace timestamps must be strictly increasing");
    if (!(s.power_w >= 0.0)) throw Error(Errc::invalid_argument, "negative power sample");
    samples_.push_back(s);
  }

  /// Marks a sampler discontinuity between the last appended sample and the next one.
  void mark_gap() {
    if (!samples_.empty()) gaps_.push_back(samples_.size());
  }

  const std::vector<PowerSample>& samples() const noexcept { return samples_; }
  /// Indices i such that a gap lies between sample i-1 and sample i.
  const std::vector<std::size_t>& gaps() const noexcept { return gaps_; }
  double nominal_cadence() const noexcept { return cadence_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  double start_time() const { return samples_.front().timestamp_s; }
  double end_time() const { return samples_.back().timestamp_s; }

  bool gap_before(std::size_t i) const {
    for (auto g : gaps_)
      if (g == i) return true;
    return false;
  }

  /// Checks the sanity bound on power and the cadence band [0.5x, 3x] away from gaps.
  /// Returns a list of human-readable violations (empty when clean).
  std::vector<std::string> validate(double max_power_w) const {
    std::vector<std::string> issues;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      if (!(s.power_w > 0.0) || s.power_w > max_power_w)
        issues.push_back("sample " + std::to_string(i) + " power " + format_double(s.power_w) + " W outside (0, " +
                         format_double(max_power_w) + "]");
      if (i > 0 && !gap_before(i)) {
        const double dt = s.timestamp_s - samples_[i - 1].timestamp_s;
        if (dt < 0.5 * cadence_ || dt > 3.0 * cadence_)
          issues.push_back("spacing " + format_double(dt) + " s before sample " + std::to_string(i) +
                           " outside cadence band");
      }
    }
    return issues;
  }

 private:
  std::vector<PowerSample> samples_;
  std::vector<std::size_t> gaps_;
  double cadence_;
};

struct PhaseWindow {
  Phase phase = Phase::decode;
  double start_s = 0.0;
  double end_s = 0.0;
  std::optional<double> snapshot_power_w;  // last instantaneous reading
  std::optional<double> counter_energy_j;  // hardware energy counter delta

  double duration() const noexcept { return end_s - start_s; }
};

enum class EnergyMethod { trapezoid, snapshot_fallback };
enum class CounterValidation { counter_agrees, counter_disagrees, counter_unavailable };

inline const char* to_string(EnergyMethod m) {
  return m == EnergyMethod::trapezoid ? "trapezoid" : "snapshot_fallback";
}

inline const char* to_string(CounterValidation v) {
  switch (v) {
    case CounterValidation::counter_agrees: return "counter_agrees";
    case CounterValidation::counter_disagrees: return "counter_disagrees";
    case CounterValidation::counter_unavailable: return "counter_unavailable";
  }
  return "counter_unavailable";
}

inline EnergyMethod energy_method_from_string(const std::string& s) {
  if (s == "trapezoid") return EnergyMethod::trapezoid;
  if (s == "snapshot_fallback") return EnergyMethod::snapshot_fallback;
  throw Error(Errc::config_error, "unknown energy method '" + s + "'");
}

inline CounterValidation counter_validation_from_string(const std::string& s) {
  if (s == "counter_agrees") return CounterValidation::counter_agrees;
  if (s == "counter_disagrees") return CounterValidation::counter_disagrees;
  if (s == "counter_unavailable") return CounterValidation::counter_unavailable;
  throw Error(Errc::config_error, "unknown counter validation '" + s + "'");
}

struct EnergyMeasurement {
  double energy_j = 0.0;
  EnergyMethod method = EnergyMethod::trapezoid;
  CounterValidation validation = CounterValidation::counter_unavailable;
  std::optional<double> relative_gap;
  bool gap_bridged = false;  // integration crossed a sampler discontinuity
};

namespace detail {

// Durations this close to a threshold count as equal to it, so that a window
// built as [0.2, 0.3] is not pushed below 0.1 s by rounding.
inline constexpr double kThresholdRelTol = 1e-9;

inline bool at_least(double duration, double threshold) {
  return duration >= threshold * (1.0 - kThresholdRelTol);
}

struct Integral {
  double joules = 0.0;
  bool crossed_gap = false;
};

inline double lerp_power(const PowerSample& a, const PowerSample& b, double t) {
  const double f = (t - a.timestamp_s) / (b.timestamp_s - a.timestamp_s);
  return a.power_w + f * (b.power_w - a.power_w);
}

inline Integral integrate(const PowerTrace& trace, const PhaseWindow& w) {
  if (!(w.end_s > w.start_s)) throw Error(Errc::invalid_argument, "phase window must have end > start");
  const auto& s = trace.samples();
  if (s.size() < 2) throw Error(Errc::insufficient_samples, "trace holds " + std::to_string(s.size()) + " sample(s)");
  if (w.start_s < s.front().timestamp_s || w.end_s > s.back().timestamp_s)
    throw Error(Errc::window_out_of_range, "window [" + format_double(w.start_s) + ", " + format_double(w.end_s) +
                                               "] not inside trace span [" + format_double(s.front().timestamp_s) +
                                               ", " + format_double(s.back().timestamp_s) + "]");

  // First sample strictly after the window start; the pair (i-1, i) encloses it.
  std::size_t i = 1;
  while (i < s.size() && s[i].timestamp_s <= w.start_s) ++i;
  if (i == s.size()) i = s.size() - 1;

  Integral out;
  double t_prev = w.start_s;
  double p_prev = lerp_power(s[i - 1], s[i], w.start_s);
  for (; i < s.size(); ++i) {
    if (trace.gap_before(i) && s[i - 1].timestamp_s < w.end_s && s[i].timestamp_s > w.start_s) out.crossed_gap = true;
    if (s[i].timestamp_s >= w.end_s) {
      const double p_end = lerp_power(s[i - 1], s[i], w.end_s);
      out.joules += 0.5 * (p_prev + p_end) * (w.end_s - t_prev);
      return out;
    }
    out.joules += 0.5 * (p_prev + s[i].power_w) * (s[i].timestamp_s - t_prev);
    t_prev = s[i].timestamp_s;
    p_prev = s[i].power_w;
  }
  return out;
}

}  // namespace detail

/// Trapezoidal integral of board power over [window.start, window.end].
///
/// Power at the window edges is linearly interpolated from the enclosing pair of
/// samples, so the result is exact for piecewise-linear power sampled at its
/// breakpoints. Intervals across a gap marker are bridged linearly.
inline double integrate_energy(const PowerTrace& trace, const PhaseWindow& window) {
  return detail::integrate(trace, window).joules;
}

/// Trapezoid for windows of at least `fallback_threshold_s`, otherwise the product
/// of the snapshot power and the window duration.
inline EnergyMeasurement energy_with_fallback(const PowerTrace& trace, const PhaseWindow& window,
                                              double fallback_threshold_s = 0.100) {
  EnergyMeasurement m;
  const double duration = window.duration();
  if (!(duration > 0.0)) throw Error(Errc::invalid_argument, "phase window must have end > start");
  if (detail::at_least(duration, fallback_threshold_s)) {
    const auto integral = detail::integrate(trace, window);
    m.energy_j = integral.joules;
    m.gap_bridged = integral.crossed_gap;
    m.method = EnergyMethod::trapezoid;
    return m;
  }
  if (!window.snapshot_power_w)
    throw Error(Errc::missing_snapshot, "window of " + format_double(duration) + " s needs a snapshot power reading");
  m.energy_j = *window.snapshot_power_w * duration;
  m.method = EnergyMethod::snapshot_fallback;
  return m;
}

/// Compares the reported energy against the hardware counter. Advisory only: the
/// reported energy is never replaced by the counter value.
inline EnergyMeasurement cross_validate(EnergyMeasurement measurement, const PhaseWindow& window,
                                        double min_duration_s = 0.200, double tolerance = 0.02) {
  measurement.relative_gap.reset();
  if (!window.counter_energy_j || !detail::at_least(window.duration(), min_duration_s)) {
    measurement.validation = CounterValidation::counter_unavailable;
    return measurement;
  }
  const double counter = *window.counter_energy_j;
  double gap = 0.0;
  if (measurement.energy_j > 0.0)
    gap = std::abs(counter - measurement.energy_j) / measurement.energy_j;
  else if (counter != 0.0)
    gap = INFINITY;
  measurement.relative_gap = gap;
  measurement.validation =
      gap <= tolerance ? CounterValidation::counter_agrees : CounterValidation::counter_disagrees;
  return measurement;
}

// ---------------------------------------------------------------------------
// Trace persistence: CSV with header, gap markers as "# gap" comment lines.
// ---------------------------------------------------------------------------

inline void write_trace_csv(std::ostream& os, const PowerTrace& trace) {
  os << "timestamp_s,power_w,sm_clock_mhz,temp_c\n";
  const auto& s = trace.samples();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (trace.gap_before(i)) os << "# gap\n";
    os << format_double(s[i].timestamp_s) << ',' << format_double(s[i].power_w) << ','
       << format_double(s[i].sm_clock_mhz) << ',' << format_double(s[i].temperature_c) << '\n';
  }
}

inline PowerTrace read_trace_csv(std::istream& is, double nominal_cadence_s = 0.050) {
  PowerTrace trace(nominal_cadence_s);
  std::string line;
  bool header_seen = false;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      if (trim(t.substr(1)) == "gap") trace.mark_gap();
      continue;
    }
    if (!header_seen) {
      if (t != "timestamp_s,power_w,sm_clock_mhz,temp_c")
        throw Error(Errc::config_error, "trace CSV header mismatch: '" + t + "'");
      header_seen = true;
      continue;
    }
    const auto cols = split(t, ',');
    if (cols.size() != 4) throw Error(Errc::config_error, "trace CSV line " + std::to_string(lineno) + ": expected 4 columns");
    trace.append({parse_double(cols[0], "timestamp_s"), parse_double(cols[1], "power_w"),
                  parse_double(cols[2], "sm_clock_mhz"), parse_double(cols[3], "temp_c")});
  }
  return trace;
}

}  // namespace phasewatt
