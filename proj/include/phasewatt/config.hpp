// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "phasewatt/backend.hpp"
#include "phasewatt/device.hpp"
#include "phasewatt/error.hpp"
#include "phasewatt/util.hpp"
#include "phasewatt/workload.hpp"

namespace phasewatt {

/// Tool configuration. File paths inside the config resolve against its directory.
struct ToolConfig {
  std::filesystem::path base_dir = ".";
  DeviceSpec device;
  std::filesystem::path profiles_path;
  std::filesystem::path fixtures_path;
  std::filesystem::path targets_path;
  std::string backend = "sim";
  SimulatorOptions simulator;
  nlohmann::json real = nlohmann::json::object();
  std::uint64_t seed = 42;
  std::filesystem::path out_dir = "out";
  nlohmann::json raw = nlohmann::json::object();

  /// Stable hash of the canonical (sorted-key) configuration text.
  std::string hash() const { return hex64(fnv1a64(raw.dump())); }
};

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error(Errc::config_error, "cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_error, p.string() + ": " + e.what());
  }
}

inline ToolConfig load_tool_config(const std::filesystem::path& path) {
  ToolConfig c;
  c.raw = read_json(path);
  c.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  auto rel = [&](const char* key, const char* fallback) {
    const std::filesystem::path p = c.raw.value(key, std::string(fallback));
    return p.is_absolute() ? p : c.base_dir / p;
  };
  try {
    c.device = read_json(rel("device", "device.json")).get<DeviceSpec>();
    c.profiles_path = rel("profiles", "profiles.seed.json");
    c.fixtures_path = rel("power_fixtures", "power_fixtures.csv");
    c.targets_path = rel("targets", "calibration_targets.csv");
    c.backend = c.raw.value("backend", c.backend);
    if (c.raw.contains("simulator")) c.simulator = c.raw.at("simulator").get<SimulatorOptions>();
    c.real = c.raw.value("real", nlohmann::json::object());
    c.seed = c.raw.value("seed", c.seed);
    c.out_dir = c.raw.value("out", std::string("out"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_error, path.string() + ": " + e.what());
  }
  return c;
}

struct CalibratedModel {
  PowerCalibration power;
  ProfileFit fit;
};

/// Power-term calibration followed by the profile fit. With `strict` an unmet
/// target raises CalibrationConflict; otherwise conflicts are left in the report.
inline CalibratedModel calibrate_model(const DeviceSpec& spec, const std::filesystem::path& fixtures,
                                       const std::filesystem::path& profiles, const std::filesystem::path& targets,
                                       bool strict = true) {
  CalibratedModel m;
  {
    std::istringstream is(read_text(fixtures));
    m.power = calibrate(spec, read_power_fixtures_csv(is));
  }
  const auto seeds = profiles_from_json(read_json(profiles));
  std::istringstream ts(read_text(targets));
  const auto tgt = read_targets_csv(ts);
  if (tgt.empty()) throw Error(Errc::invalid_argument, "target file " + targets.string() + " holds no targets");
  m.fit = strict ? fit_profiles(spec, m.power.params, seeds, tgt) : fit_profiles_report(spec, m.power.params, seeds, tgt);
  return m;
}

inline CalibratedModel calibrate_model(const ToolConfig& c, bool strict = true) {
  return calibrate_model(c.device, c.fixtures_path, c.profiles_path, c.targets_path, strict);
}

}  // namespace phasewatt
