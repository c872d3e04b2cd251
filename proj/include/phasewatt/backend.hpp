// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasewatt/device.hpp"
#include "phasewatt/error.hpp"
#include "phasewatt/telemetry.hpp"
#include "phasewatt/util.hpp"
#include "phasewatt/workload.hpp"

namespace phasewatt {

struct BackendCapabilities {
  bool can_lock_clock = false;
  bool can_set_cap = false;
  bool can_read_counter = false;
  std::vector<Mhz> supported_locks;
  double cap_min_w = 0.0;
  double cap_max_w = 0.0;
};

/// One static lever per request. Neither set means free-running.
struct ControlRequest {
  std::optional<Mhz> lock_mhz;
  std::optional<double> cap_w;

  bool free_run() const noexcept { return !lock_mhz && !cap_w; }
  std::string describe() const {
    if (lock_mhz) return "lock=" + std::to_string(*lock_mhz);
    if (cap_w) return "cap=" + format_double(*cap_w);
    return "free";
  }
  bool operator==(const ControlRequest&) const = default;
};

struct WorkloadRequest {
  std::string architecture;
  PhasePoint point;
  ControlRequest control;
  std::uint64_t seed = 0;
};

struct WorkloadResult {
  long long tokens_processed = 0;
  double wall_time_s = 0.0;
  PowerTrace trace;
  PhaseWindow window;  // the measured phase inside `trace`
  std::optional<double> counter_energy_j;
  DvfsState observed_state;
};

struct MemoryClockReadback {
  int requested_mhz = 0;
  int actual_mhz = 0;
  bool changed = false;
};

/// Control-and-measure interface over one GPU. One run in flight per instance.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  virtual BackendCapabilities capabilities() const = 0;
  virtual WorkloadResult run(const WorkloadRequest& request) = 0;
  /// Restores free-running state: boost clock, user cap cleared, throttle flag cleared.
  virtual void reset() = 0;
  virtual DvfsState read_state() const = 0;
  /// Issues a control request without running a workload; returns the read-back state.
  virtual DvfsState apply_control(const ControlRequest& control) = 0;
  virtual MemoryClockReadback set_memory_clock(int mhz) = 0;
  /// Stack metadata recorded verbatim into run records.
  virtual nlohmann::json metadata() const { return nlohmann::json::object(); }
};

/// Rejects requests the backend cannot honour.
inline void check_control(const BackendCapabilities& caps, const ControlRequest& c) {
  if (c.lock_mhz && c.cap_w)
    throw Error(Errc::capability_error, "a request may set a clock lock or a power cap, not both");
  if (c.lock_mhz) {
    if (!caps.can_lock_clock) throw Error(Errc::capability_error, "backend cannot lock clocks");
    if (std::find(caps.supported_locks.begin(), caps.supported_locks.end(), *c.lock_mhz) == caps.supported_locks.end())
      throw Error(Errc::capability_error, "lock " + std::to_string(*c.lock_mhz) + " MHz is not a supported level");
  }
  if (c.cap_w) {
    if (!caps.can_set_cap) throw Error(Errc::capability_error, "backend cannot set power caps");
    if (*c.cap_w < caps.cap_min_w || *c.cap_w > caps.cap_max_w)
      throw Error(Errc::capability_error, "cap " + format_double(*c.cap_w) + " W outside [" +
                                              format_double(caps.cap_min_w) + ", " + format_double(caps.cap_max_w) +
                                              "]");
  }
}

struct SimulatorOptions {
  double noise_sigma = 0.005;  // multiplicative, per power sample
  double cadence_s = 0.050;
  double jitter_s = 0.005;
  double padding_s = 0.100;      // loaded samples before and after the phase window
  double counter_bias = 0.004;   // relative offset of the energy counter
  double throttle_probability = 0.0;
  int rated_memory_clock_mhz = 3201;
};

inline void to_json(nlohmann::json& j, const SimulatorOptions& o) {
  j = nlohmann::json{{"noise_sigma", o.noise_sigma},       {"cadence_s", o.cadence_s},
                     {"jitter_s", o.jitter_s},             {"padding_s", o.padding_s},
                     {"counter_bias", o.counter_bias},     {"throttle_probability", o.throttle_probability},
                     {"rated_memory_clock_mhz", o.rated_memory_clock_mhz}};
}

inline void from_json(const nlohmann::json& j, SimulatorOptions& o) {
  o = SimulatorOptions{};
  o.noise_sigma = j.value("noise_sigma", o.noise_sigma);
  o.cadence_s = j.value("cadence_s", o.cadence_s);
  o.jitter_s = j.value("jitter_s", o.jitter_s);
  o.padding_s = j.value("padding_s", o.padding_s);
  o.counter_bias = j.value("counter_bias", o.counter_bias);
  o.throttle_probability = j.value("throttle_probability", o.throttle_probability);
  o.rated_memory_clock_mhz = j.value("rated_memory_clock_mhz", o.rated_memory_clock_mhz);
  if (o.noise_sigma < 0 || o.cadence_s <= 0 || o.jitter_s < 0 || o.jitter_s >= 0.5 * o.cadence_s || o.padding_s < 0)
    throw Error(Errc::config_error, "invalid simulator options");
}

/// Analytical H200 stand-in: device-model control semantics, workload-model step
/// times and a synthesised power trace.
class SimulatedBackend final : public Backend {
 public:
  SimulatedBackend(DeviceSpec spec, PowerModelParams power, ProfileSet profiles, SimulatorOptions options = {})
      : spec_(std::move(spec)), power_(std::move(power)), profiles_(std::move(profiles)), opt_(options) {
    spec_.validate();
    state_ = free_running_state(spec_);
  }

  std::string id() const override { return "sim"; }

  BackendCapabilities capabilities() const override {
    BackendCapabilities c;
    c.can_lock_clock = true;
    c.can_set_cap = true;
    c.can_read_counter = true;
    c.supported_locks = spec_.supported_locks_mhz;
    c.cap_min_w = std::max(spec_.min_cap_w, spec_.idle_power_w);
    c.cap_max_w = spec_.tdp_w;
    return c;
  }

  const DeviceSpec& spec() const noexcept { return spec_; }
  const ProfileSet& profiles() const noexcept { return profiles_; }
  const PowerModelParams& power_params() const noexcept { return power_; }
  const SimulatorOptions& options() const noexcept { return opt_; }

  void reset() override { state_ = free_running_state(spec_); }

  DvfsState read_state() const override { return state_; }

  DvfsState apply_control(const ControlRequest& c) override {
    check_control(capabilities(), c);
    if (c.lock_mhz) {
      state_ = apply_clock_lock(spec_, *c.lock_mhz);
    } else if (c.cap_w) {
      // idle device: the cap is recorded but cannot engage
      state_ = DvfsState{};
      state_.configured_cap_w = c.cap_w;
      state_.actual_clock_mhz = spec_.base_clock_mhz;
    } else {
      state_ = free_running_state(spec_);
    }
    return read_state();
  }

  MemoryClockReadback set_memory_clock(int mhz) override {
    // The driver accepts the call and keeps HBM at its rated clock.
    return {mhz, opt_.rated_memory_clock_mhz, false};
  }

  nlohmann::json metadata() const override {
    return {{"backend", "sim"}, {"device", spec_.name}, {"simulator", opt_}};
  }

  WorkloadResult run(const WorkloadRequest& req) override {
    check_control(capabilities(), req.control);
    const ArchitectureProfile& profile = find_profile(profiles_, req.architecture);
    const PowerTerms& terms = power_.at(req.architecture, req.point.phase);
    req.point.validate();
    if (req.point.phase == Phase::decode && req.point.output_len < 1)
      throw Error(Errc::invalid_argument, "decode run needs output_len >= 1");

    const double u = utilization_scale(profile, req.point);
    DvfsState s;
    if (req.control.lock_mhz) {
      s = apply_clock_lock(spec_, *req.control.lock_mhz);
    } else if (req.control.cap_w) {
      s.configured_cap_w = req.control.cap_w;
      s.actual_clock_mhz = spec_.base_clock_mhz;
      s = cap_resolution(spec_, terms, s, u);
    } else {
      s = free_running_state(spec_);
    }
    s = throttle_artefact(spec_, s, mix_seed(req.seed, 0x7468726f74746c65ULL), opt_.throttle_probability);
    state_ = s;

    WorkloadResult out;
    const double step = step_time(profile, req.point, state_.actual_clock_mhz, spec_);
    const long long b = req.point.batch;
    if (req.point.phase == Phase::decode) {
      out.tokens_processed = b * req.point.output_len;
      out.wall_time_s = step * req.point.output_len;
    } else {
      out.tokens_processed = b * req.point.context;
      out.wall_time_s = step;
    }
    const double load_w = simulated_power(spec_, terms, state_.actual_clock_mhz, u);
    synthesise(out, load_w, req.seed);
    out.counter_energy_j = std::round(load_w * out.wall_time_s * (1.0 + opt_.counter_bias) * 1e3) / 1e3;
    out.window.counter_energy_j = out.counter_energy_j;
    out.window.phase = req.point.phase;
    out.observed_state = read_state();
    return out;
  }

 private:
  void synthesise(WorkloadResult& out, double load_w, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> jitter(-opt_.jitter_s, opt_.jitter_s);
    const double start = opt_.padding_s;
    const double end = start + out.wall_time_s;
    out.window.start_s = start;
    out.window.end_s = end;
    out.trace = PowerTrace(opt_.cadence_s);

    auto sample_at = [&](double t) {
      const double z = noise(rng);
      const double p = std::max(1e-3, load_w * (1.0 + opt_.noise_sigma * z));
      const double temp = 42.0 + 3.0 * std::min(1.0, p / spec_.tdp_w);
      out.trace.append({t, p, static_cast<double>(state_.actual_clock_mhz), temp});
      return p;
    };

    double t = 0.0;
    std::optional<double> snapshot;
    while (true) {
      const double p = sample_at(t);
      if (t <= end) snapshot = p;
      if (t >= end + opt_.padding_s && t > end) break;
      t = opt_.cadence_s * std::round(t / opt_.cadence_s + 1.0) + jitter(rng);
    }
    out.window.snapshot_power_w = snapshot;
  }

  DeviceSpec spec_;
  PowerModelParams power_;
  ProfileSet profiles_;
  SimulatorOptions opt_;
  DvfsState state_;
};

}  // namespace phasewatt
