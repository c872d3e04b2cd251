// SPDX-License-Identifier: Apache-2.0
#pragma once

// Real-hardware adapter. Drives clocks and caps through the GPU management
// utility and the workload through a serving engine's HTTP completion endpoint.
// Not exercised by the desk-scale tests beyond the availability check.

#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "phasewatt/backend.hpp"

namespace phasewatt {

struct RealBackendConfig {
  std::string smi_path = "nvidia-smi";
  int gpu_index = 0;
  std::string endpoint = "http://127.0.0.1:8000";
  std::string completion_path = "/v1/completions";
  std::string model;
  double sample_interval_s = 0.050;
  DeviceSpec spec;
};

inline void from_json(const nlohmann::json& j, RealBackendConfig& c) {
  c = RealBackendConfig{};
  c.smi_path = j.value("smi_path", c.smi_path);
  c.gpu_index = j.value("gpu_index", c.gpu_index);
  c.endpoint = j.value("endpoint", c.endpoint);
  c.completion_path = j.value("completion_path", c.completion_path);
  c.model = j.value("model", c.model);
  c.sample_interval_s = j.value("sample_interval_s", c.sample_interval_s);
}

namespace detail {

struct CommandResult {
  int status = -1;
  std::string output;
};

inline CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen((cmd + " 2>&1").c_str(), "r"), pclose);
  if (!pipe) return r;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) r.output += buf.data();
  r.status = pclose(pipe.release());
  return r;
}

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

}  // namespace detail

class RealBackend final : public Backend {
 public:
  explicit RealBackend(RealBackendConfig cfg) : cfg_(std::move(cfg)) {
    const auto probe = smi("--query-gpu=name --format=csv,noheader");
    if (probe.status != 0)
      throw Error(Errc::backend_unavailable,
                  "'" + cfg_.smi_path + "' not usable (" + trim(probe.output) +
                      "); install the NVIDIA driver utilities or set real.smi_path in the config, or use --backend sim");
    device_name_ = trim(probe.output);
  }

  std::string id() const override { return "real"; }

  BackendCapabilities capabilities() const override {
    BackendCapabilities c;
    c.can_lock_clock = true;
    c.can_set_cap = true;
    c.can_read_counter = false;
    c.supported_locks = cfg_.spec.supported_locks_mhz;
    c.cap_min_w = std::max(cfg_.spec.min_cap_w, cfg_.spec.idle_power_w);
    c.cap_max_w = cfg_.spec.tdp_w;
    return c;
  }

  void reset() override {
    checked(smi("-rgc"), "reset clocks");
    checked(smi("-pl " + format_double(cfg_.spec.tdp_w)), "reset power limit");
    requested_ = ControlRequest{};
  }

  DvfsState read_state() const override {
    DvfsState s;
    if (requested_.lock_mhz) s.requested_lock_mhz = requested_.lock_mhz;
    if (requested_.cap_w) s.configured_cap_w = requested_.cap_w;
    const auto q = query();
    s.actual_clock_mhz = static_cast<Mhz>(std::lround(q.sm_clock_mhz));
    if (requested_.cap_w) s.cap_engaged = q.power_w >= 0.98 * *requested_.cap_w;
    return s;
  }

  DvfsState apply_control(const ControlRequest& c) override {
    check_control(capabilities(), c);
    apply(c);
    return read_state();
  }

  MemoryClockReadback set_memory_clock(int mhz) override {
    const int before = static_cast<int>(std::lround(query_field("clocks.mem")));
    smi("-lmc " + std::to_string(mhz) + "," + std::to_string(mhz));
    const int after = static_cast<int>(std::lround(query_field("clocks.mem")));
    return {mhz, after, after != before};
  }

  nlohmann::json metadata() const override {
    auto driver = trim(smi("--query-gpu=driver_version --format=csv,noheader").output);
    return {{"backend", "real"}, {"device", device_name_}, {"driver", driver}, {"endpoint", cfg_.endpoint},
            {"model", cfg_.model}};
  }

  WorkloadResult run(const WorkloadRequest& req) override {
    check_control(capabilities(), req.control);
    req.point.validate();
    apply(req.control);

    WorkloadResult out;
    out.trace = PowerTrace(cfg_.sample_interval_s);
    std::mutex mu;
    std::atomic<bool> done{false};
    const auto epoch = std::chrono::steady_clock::now();
    auto now_s = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch).count(); };

    std::thread sampler([&] {
      while (!done.load()) {
        const auto q = query();
        {
          std::lock_guard<std::mutex> lock(mu);
          const double t = now_s();
          if (out.trace.empty() || t > out.trace.end_time())
            out.trace.append({t, q.power_w, q.sm_clock_mhz, q.temperature_c});
        }
        std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.sample_interval_s));
      }
    });

    std::this_thread::sleep_for(std::chrono::duration<double>(2 * cfg_.sample_interval_s));
    out.window.phase = req.point.phase;
    out.window.start_s = now_s();
    const bool ok = issue(req);
    out.window.end_s = now_s();
    std::this_thread::sleep_for(std::chrono::duration<double>(2 * cfg_.sample_interval_s));
    done = true;
    sampler.join();
    if (!ok) throw Error(Errc::backend_unavailable, "serving endpoint " + cfg_.endpoint + " did not complete the request");

    out.wall_time_s = out.window.duration();
    out.tokens_processed = req.point.phase == Phase::decode
                               ? static_cast<long long>(req.point.batch) * req.point.output_len
                               : static_cast<long long>(req.point.batch) * req.point.context;
    {
      std::lock_guard<std::mutex> lock(mu);
      for (const auto& s : out.trace.samples())
        if (s.timestamp_s <= out.window.end_s) out.window.snapshot_power_w = s.power_w;
    }
    out.observed_state = read_state();
    return out;
  }

 private:
  struct Query {
    double power_w = 0, sm_clock_mhz = 0, temperature_c = 0;
  };

  detail::CommandResult smi(const std::string& args) const {
    return detail::run_command(detail::shell_quote(cfg_.smi_path) + " -i " + std::to_string(cfg_.gpu_index) + " " +
                               args);
  }

  static void checked(const detail::CommandResult& r, const std::string& what) {
    if (r.status != 0) throw Error(Errc::backend_unavailable, what + " failed: " + trim(r.output));
  }

  double query_field(const std::string& field) const {
    const auto r = smi("--query-gpu=" + field + " --format=csv,noheader,nounits");
    checked(r, "query " + field);
    return parse_double(trim(r.output), field);
  }

  Query query() const {
    const auto r = smi("--query-gpu=power.draw,clocks.sm,temperature.gpu --format=csv,noheader,nounits");
    checked(r, "telemetry query");
    const auto cols = split(trim(r.output), ',');
    if (cols.size() != 3) throw Error(Errc::backend_unavailable, "unexpected telemetry output: " + r.output);
    return {parse_double(cols[0], "power.draw"), parse_double(cols[1], "clocks.sm"),
            parse_double(cols[2], "temperature.gpu")};
  }

  void apply(const ControlRequest& c) {
    reset();
    if (c.lock_mhz)
      checked(smi("-lgc " + std::to_string(*c.lock_mhz) + "," + std::to_string(*c.lock_mhz)), "clock lock");
    if (c.cap_w) checked(smi("-pl " + format_double(*c.cap_w)), "power cap");
    requested_ = c;
  }

  bool issue(const WorkloadRequest& req) const {
    httplib::Client client(cfg_.endpoint);
    client.set_read_timeout(600, 0);
    const bool prefill = req.point.phase == Phase::prefill;
    nlohmann::json body{{"model", cfg_.model},
                        {"prompt", std::vector<std::vector<int>>(req.point.batch, std::vector<int>(req.point.context, 1))},
                        {"max_tokens", prefill ? 1 : req.point.output_len},
                        {"ignore_eos", true},
                        {"temperature", 0.0}};
    auto res = client.Post(cfg_.completion_path, body.dump(), "application/json");
    return res && res->status == 200;
  }

  RealBackendConfig cfg_;
  std::string device_name_;
  ControlRequest requested_;
};

}  // namespace phasewatt
