// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace phasewatt {

/// Every failure the toolkit can raise. Codes are grouped into families so the
/// CLI can map each family to a distinct exit status.
enum class Errc {
  // generic
  invalid_argument,
  config_error,
  // telemetry
  insufficient_samples,
  window_out_of_range,
  missing_snapshot,
  // device model
  unsupported_clock,
  underdetermined_fit,
  // calibration
  calibration_conflict,
  // backend
  capability_error,
  unknown_architecture,
  backend_unavailable,
  // orchestrator
  empty_grid,
  aggregation_mismatch,
  // analysis
  division_by_zero,
  incomplete_cell,
  axis_mismatch,
  // policy
  policy_apply_error,
};

enum class ErrorFamily { usage, config, telemetry, device, calibration, backend, orchestrator, analysis, policy };

constexpr ErrorFamily family_of(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return ErrorFamily::usage;
    case Errc::config_error: return ErrorFamily::config;
    case Errc::insufficient_samples:
    case Errc::window_out_of_range:
    case Errc::missing_snapshot: return ErrorFamily::telemetry;
    case Errc::unsupported_clock:
    case Errc::underdetermined_fit: return ErrorFamily::device;
    case Errc::calibration_conflict: return ErrorFamily::calibration;
    case Errc::capability_error:
    case Errc::unknown_architecture:
    case Errc::backend_unavailable: return ErrorFamily::backend;
    case Errc::empty_grid:
    case Errc::aggregation_mismatch: return ErrorFamily::orchestrator;
    case Errc::division_by_zero:
    case Errc::incomplete_cell:
    case Errc::axis_mismatch: return ErrorFamily::analysis;
    case Errc::policy_apply_error: return ErrorFamily::policy;
  }
  return ErrorFamily::usage;
}

/// Process exit status per family; 1 is reserved for "completed with failures".
constexpr int exit_code_of(ErrorFamily f) noexcept {
  switch (f) {
    case ErrorFamily::usage: return 2;
    case ErrorFamily::config: return 3;
    case ErrorFamily::telemetry: return 4;
    case ErrorFamily::device: return 5;
    case ErrorFamily::calibration: return 6;
    case ErrorFamily::backend: return 7;
    case ErrorFamily::orchestrator: return 8;
    case ErrorFamily::analysis: return 9;
    case ErrorFamily::policy: return 10;
  }
  return 2;
}

constexpr const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::config_error: return "ConfigError";
    case Errc::insufficient_samples: return "InsufficientSamples";
    case Errc::window_out_of_range: return "WindowOutOfRange";
    case Errc::missing_snapshot: return "MissingSnapshot";
    case Errc::unsupported_clock: return "UnsupportedClock";
    case Errc::underdetermined_fit: return "UnderdeterminedFit";
    case Errc::calibration_conflict: return "CalibrationConflict";
    case Errc::capability_error: return "CapabilityError";
    case Errc::unknown_architecture: return "UnknownArchitecture";
    case Errc::backend_unavailable: return "BackendUnavailable";
    case Errc::empty_grid: return "EmptyGrid";
    case Errc::aggregation_mismatch: return "AggregationMismatch";
    case Errc::division_by_zero: return "DivisionByZero";
    case Errc::incomplete_cell: return "IncompleteCell";
    case Errc::axis_mismatch: return "AxisMismatch";
    case Errc::policy_apply_error: return "PolicyApplyError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }
  ErrorFamily family() const noexcept { return family_of(code_); }

 private:
  Errc code_;
};

}  // namespace phasewatt
