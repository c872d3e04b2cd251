// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared fixtures: the calibrated model shipped in data/ and one cached default sweep.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "phasewatt/analysis.hpp"
#include "phasewatt/backend.hpp"
#include "phasewatt/config.hpp"
#include "phasewatt/orchestrator.hpp"

namespace phasewatt::test {

inline std::filesystem::path data_dir() { return PHASEWATT_DATA_DIR; }

struct Model {
  DeviceSpec spec;
  PowerModelParams power;
  ProfileSet profiles;
};

inline const Model& calibrated() {
  static const Model m = [] {
    const auto d = data_dir();
    const DeviceSpec spec = read_json(d / "device.json").get<DeviceSpec>();
    auto cm = calibrate_model(spec, d / "power_fixtures.csv", d / "profiles.seed.json", d / "calibration_targets.csv");
    return Model{spec, cm.power.params, cm.fit.profiles};
  }();
  return m;
}

inline SimulatedBackend make_sim(SimulatorOptions opt = {}) {
  const auto& m = calibrated();
  return SimulatedBackend(m.spec, m.power, m.profiles, opt);
}

/// Default grid, seed 42, 0.5% power noise, 10 repetitions.
struct Sweep {
  SweepGrid grid;
  AggregateSet agg;
  ClockMap map_1pct;
  ClockMap map_5pct;
};

inline const Sweep& default_sweep() {
  static const Sweep s = [] {
    Sweep out;
    auto sim = make_sim();
    MemorySink sink;
    ExecuteOptions opt;
    opt.seed = 42;
    opt.repetitions = out.grid.repetitions;
    opt.warmup = out.grid.warmup;
    execute(plan(out.grid), sim, sink, opt);
    out.agg = aggregate_all(sink.records(), out.grid.repetitions);
    out.map_1pct = optimal_clock_map(out.agg.points, out.grid.clocks, 0.01);
    out.map_5pct = optimal_clock_map(out.agg.points, out.grid.clocks, 0.05);
    return out;
  }();
  return s;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("phasewatt-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace phasewatt::test
