// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "phasewatt/error.hpp"
#include "phasewatt/telemetry.hpp"

namespace phasewatt {

/// Tokens a phase run processes: prompt x batch for prefill, output x batch for decode.
inline long long phase_tokens(Phase phase, int batch, int context, int output_len) {
  return static_cast<long long>(batch) * (phase == Phase::prefill ? context : output_len);
}

/// Energy per processed token in millijoules.
inline double energy_per_token(double energy_j, long long tokens) {
  if (tokens <= 0) throw Error(Errc::division_by_zero, "energy per token with zero tokens");
  return energy_j * 1e3 / static_cast<double>(tokens);
}

inline double energy_per_token(Phase phase, double energy_j, int batch, int context, int output_len) {
  return energy_per_token(energy_j, phase_tokens(phase, batch, context, output_len));
}

}  // namespace phasewatt
