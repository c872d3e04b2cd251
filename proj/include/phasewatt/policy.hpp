// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasewatt/analysis.hpp"
#include "phasewatt/backend.hpp"
#include "phasewatt/error.hpp"
#include "phasewatt/util.hpp"

namespace phasewatt {

inline constexpr int kPolicySchemaVersion = 1;

struct PolicyEntry {
  std::string architecture;
  Phase phase = Phase::decode;
  int batch_lo = 1, batch_hi = 1;
  int context_lo = 1, context_hi = 1;
  Mhz lock_mhz = 0;
  double expected_power_saving_w = 0.0;
  double expected_power_saving_pct = 0.0;
  double expected_energy_saving_pct = 0.0;
  double expected_throughput_loss_pct = 0.0;
  std::vector<std::string> provenance;  // config ids of the aggregates the figures came from

  bool matches(const std::string& arch, Phase ph, int batch, int context) const {
    return arch == architecture && ph == phase && batch >= batch_lo && batch <= batch_hi && context >= context_lo &&
           context <= context_hi;
  }
  std::string describe() const {
    return architecture + "/" + to_string(phase) + " batch [" + std::to_string(batch_lo) + "," +
           std::to_string(batch_hi) + "] context [" + std::to_string(context_lo) + "," + std::to_string(context_hi) +
           "] lock " + std::to_string(lock_mhz);
  }
  bool operator==(const PolicyEntry&) const = default;
};

struct OmittedArchitecture {
  std::string architecture;
  std::string reason;
  bool operator==(const OmittedArchitecture&) const = default;
};

struct ClockPolicy {
  double loss_budget = 0.01;
  Mhz default_lock_mhz = 1830;
  std::vector<PolicyEntry> entries;
  std::vector<OmittedArchitecture> omitted;
  std::map<std::string, std::string> classes;  // architecture -> DVFS class name
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string config_hash;

  bool operator==(const ClockPolicy&) const = default;
};

namespace detail {

/// Consecutive bands [v_i, v_{i+1} - 1] over sorted grid values; the last band is [v_k, v_k].
inline std::vector<std::pair<int, int>> bands_of(std::vector<int> values) {
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < values.size(); ++i)
    out.emplace_back(values[i], i + 1 < values.size() ? values[i + 1] - 1 : values[i]);
  return out;
}

struct CellPick {
  Mhz lock = 0;
  const CellChoice* cell = nullptr;
};

inline PolicyEntry entry_for(const std::string& arch, Phase phase, std::pair<int, int> batch,
                             std::pair<int, int> context, const std::vector<CellPick>& picks) {
  PolicyEntry e{arch, phase, batch.first, batch.second, context.first, context.second, picks.front().lock,
                INFINITY, INFINITY, INFINITY, 0.0, {}};
  // worst case over the merged cells
  for (const auto& p : picks) {
    const auto& ref = p.cell->at(p.cell->reference_clock);
    const auto& s = p.cell->at(p.lock);
    e.expected_power_saving_w = std::min(e.expected_power_saving_w, ref.power_w - s.power_w);
    e.expected_power_saving_pct = std::min(e.expected_power_saving_pct, 100.0 * (1.0 - s.power_w / ref.power_w));
    e.expected_energy_saving_pct = std::min(e.expected_energy_saving_pct, 100.0 * (1.0 - s.mj_per_tok / ref.mj_per_tok));
    e.expected_throughput_loss_pct =
        std::max(e.expected_throughput_loss_pct, 100.0 * (1.0 - s.tok_per_s / ref.tok_per_s));
    e.provenance.push_back(s.config_id);
  }
  return e;
}

}  // namespace detail

/// Builds a static clock policy from DVFS classes and the clock map.
///
/// Decode: batch-invariant architectures get one entry per context band spanning
/// all batches (the highest budget clock of the row); batch-sensitive ones get the
/// per-cell budget clock, merged across adjacent batch bands with equal locks;
/// compute-light ones get the per-cell budget clock, which the class guarantees is
/// the lowest level on the classified row. Adjacent context bands with identical
/// batch splits are merged. Prefill entries stay at the reference lock unless a
/// lower lock saves at least `prefill_min_saving` energy within the loss budget.
inline ClockPolicy synthesize(const std::map<std::string, DvfsClass>& classes, const ClockMap& map,
                              double loss_budget, const DeviceSpec& spec, double prefill_min_saving = 0.05) {
  if (!(loss_budget > 0.0)) throw Error(Errc::invalid_argument, "loss budget must be positive");
  ClockPolicy policy;
  policy.loss_budget = loss_budget;
  policy.default_lock_mhz = spec.base_clock_mhz;

  std::set<std::string> archs;
  for (const auto& [key, _] : map) archs.insert(key.architecture);
  for (const auto& [arch, _] : classes)
    if (!archs.count(arch)) throw Error(Errc::invalid_argument, "classified architecture " + arch + " not in the clock map");

  auto loss_of = [](const CellChoice& c, Mhz lock) {
    return 1.0 - c.at(lock).tok_per_s / c.at(c.reference_clock).tok_per_s;
  };

  for (const auto& arch : archs) {
    for (Phase phase : {Phase::prefill, Phase::decode}) {
      std::vector<int> batches, contexts;
      for (const auto& [key, _] : map)
        if (key.architecture == arch && key.phase == phase) {
          batches.push_back(key.batch);
          contexts.push_back(key.context);
        }
      if (batches.empty()) continue;
      const auto bbands = detail::bands_of(batches);
      const auto cbands = detail::bands_of(contexts);

      std::optional<DvfsClassKind> kind;
      if (phase == Phase::decode) {
        auto it = classes.find(arch);
        if (it == classes.end() || it->second.kind == DvfsClassKind::unclassified) {
          std::string why = it == classes.end() ? "no DVFS class supplied" : "unclassified; evidence";
          if (it != classes.end())
            for (const auto& [b, c] : it->second.evidence) why += " b" + std::to_string(b) + "=" + std::to_string(c);
          policy.omitted.push_back({arch, why});
          continue;
        }
        kind = it->second.kind;
        policy.classes[arch] = to_string(*kind);
      }

      // rows[context band] = per batch band picks
      std::vector<std::vector<detail::CellPick>> rows;
      for (const auto& cb : cbands) {
        std::vector<detail::CellPick> row;
        for (const auto& bb : bbands) {
          auto it = map.find({arch, phase, bb.first, cb.first});
          if (it == map.end())
            throw Error(Errc::incomplete_cell, arch + "/" + to_string(phase) + " b=" + std::to_string(bb.first) +
                                                   " ctx=" + std::to_string(cb.first) + " missing from the clock map");
          const CellChoice& cell = it->second;
          Mhz lock = cell.reference_clock;
          if (phase == Phase::decode) {
            lock = cell.budget_clock;
          } else {
            for (const auto& s : cell.samples) {
              const double saving = 1.0 - s.mj_per_tok / cell.at(cell.reference_clock).mj_per_tok;
              if (loss_of(cell, s.lock_mhz) <= loss_budget && saving >= prefill_min_saving) {
                lock = s.lock_mhz;
                break;
              }
            }
          }
          row.push_back({lock, &cell});
        }
        if (kind == DvfsClassKind::batch_invariant) {
          Mhz top = 0;
          for (const auto& p : row) top = std::max(top, p.lock);
          bool within = true;
          for (const auto& p : row) within = within && loss_of(*p.cell, top) <= loss_budget;
          if (within)
            for (auto& p : row) p.lock = top;
        }
        rows.push_back(row);
      }

      // merge along batch within each context band: runs of equal locks
      struct Run {
        std::size_t first, last;
        Mhz lock;
      };
      auto runs_of = [&](const std::vector<detail::CellPick>& row) {
        std::vector<Run> runs;
        for (std::size_t i = 0; i < row.size(); ++i) {
          if (!runs.empty() && runs.back().lock == row[i].lock)
            runs.back().last = i;
          else
            runs.push_back({i, i, row[i].lock});
        }
        return runs;
      };
      auto same_runs = [](const std::vector<Run>& a, const std::vector<Run>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
          if (a[i].first != b[i].first || a[i].last != b[i].last || a[i].lock != b[i].lock) return false;
        return true;
      };
      for (std::size_t c0 = 0; c0 < rows.size();) {
        const auto runs = runs_of(rows[c0]);
        std::size_t c1 = c0;
        while (c1 + 1 < rows.size() && same_runs(runs, runs_of(rows[c1 + 1]))) ++c1;
        for (const auto& r : runs) {
          std::vector<detail::CellPick> picks;
          for (std::size_t c = c0; c <= c1; ++c)
            for (std::size_t b = r.first; b <= r.last; ++b) picks.push_back(rows[c][b]);
          policy.entries.push_back(detail::entry_for(arch, phase, {bbands[r.first].first, bbands[r.last].second},
                                                     {cbands[c0].first, cbands[c1].second}, picks));
        }
        c0 = c1 + 1;
      }
    }
  }
  return policy;
}

/// Entry governing a runtime context, or nullopt for the default entry.
inline std::optional<PolicyEntry> lookup(const ClockPolicy& policy, const std::string& arch, Phase phase, int batch,
                                         int context) {
  for (const auto& e : policy.entries)
    if (e.matches(arch, phase, batch, context)) return e;
  return std::nullopt;
}

inline Mhz lookup_lock(const ClockPolicy& policy, const std::string& arch, Phase phase, int batch, int context) {
  const auto e = lookup(policy, arch, phase, batch, context);
  return e ? e->lock_mhz : policy.default_lock_mhz;
}

struct ApplyResult {
  std::optional<PolicyEntry> entry;  // nullopt: default entry
  Mhz requested_mhz = 0;
  DvfsState state;
  bool diverged = false;
  std::string log;
};

/// Issues the single lock request the policy prescribes for the context and
/// reports the read-back state. Divergence between requested and actual clock is
/// logged to `log` (when given) and flagged in the result.
inline ApplyResult apply(const ClockPolicy& policy, Backend& backend, const std::string& arch, Phase phase, int batch,
                         int context, std::ostream* log = nullptr) {
  ApplyResult r;
  r.entry = lookup(policy, arch, phase, batch, context);
  r.requested_mhz = r.entry ? r.entry->lock_mhz : policy.default_lock_mhz;
  const std::string who = r.entry ? r.entry->describe() : "default entry lock " + std::to_string(r.requested_mhz);
  try {
    r.state = backend.apply_control({r.requested_mhz, std::nullopt});
  } catch (const Error& e) {
    throw Error(Errc::policy_apply_error, who + ": " + e.what());
  }
  r.diverged = r.state.actual_clock_mhz != r.requested_mhz;
  r.log = who + ": requested " + std::to_string(r.requested_mhz) + " MHz, actual " +
          std::to_string(r.state.actual_clock_mhz) + " MHz" + (r.diverged ? " (DIVERGED)" : "");
  if (log) *log << r.log << '\n';
  return r;
}

// ---------------------------------------------------------------------------
// Canonical serialisation: sorted keys, fixed entry order, round-trip doubles.
// ---------------------------------------------------------------------------

inline nlohmann::json policy_to_json(const ClockPolicy& p) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : p.entries)
    entries.push_back({{"architecture", e.architecture},
                       {"phase", to_string(e.phase)},
                       {"batch_band", {e.batch_lo, e.batch_hi}},
                       {"context_band_tokens", {e.context_lo, e.context_hi}},
                       {"lock_mhz", e.lock_mhz},
                       {"expected_power_saving_w", e.expected_power_saving_w},
                       {"expected_power_saving_pct", e.expected_power_saving_pct},
                       {"expected_energy_saving_pct", e.expected_energy_saving_pct},
                       {"expected_throughput_loss_pct", e.expected_throughput_loss_pct},
                       {"provenance", e.provenance}});
  nlohmann::json omitted = nlohmann::json::array();
  for (const auto& o : p.omitted) omitted.push_back({{"architecture", o.architecture}, {"reason", o.reason}});
  return {{"schema_version", kPolicySchemaVersion},
          {"tool_version", p.tool_version},
          {"seed", p.seed},
          {"config_hash", p.config_hash},
          {"loss_budget", p.loss_budget},
          {"default_lock_mhz", p.default_lock_mhz},
          {"classes", p.classes},
          {"entries", entries},
          {"omitted", omitted}};
}

inline std::string export_policy(const ClockPolicy& p) { return policy_to_json(p).dump(2) + "\n"; }

inline ClockPolicy policy_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kPolicySchemaVersion)
    throw Error(Errc::config_error, "unsupported policy schema_version");
  ClockPolicy p;
  p.tool_version = j.at("tool_version").get<std::string>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.config_hash = j.at("config_hash").get<std::string>();
  p.loss_budget = j.at("loss_budget").get<double>();
  p.default_lock_mhz = j.at("default_lock_mhz").get<Mhz>();
  p.classes = j.at("classes").get<std::map<std::string, std::string>>();
  for (const auto& e : j.at("entries")) {
    PolicyEntry x;
    x.architecture = e.at("architecture").get<std::string>();
    x.phase = phase_from_string(e.at("phase").get<std::string>());
    x.batch_lo = e.at("batch_band").at(0).get<int>();
    x.batch_hi = e.at("batch_band").at(1).get<int>();
    x.context_lo = e.at("context_band_tokens").at(0).get<int>();
    x.context_hi = e.at("context_band_tokens").at(1).get<int>();
    x.lock_mhz = e.at("lock_mhz").get<Mhz>();
    x.expected_power_saving_w = e.at("expected_power_saving_w").get<double>();
    x.expected_power_saving_pct = e.at("expected_power_saving_pct").get<double>();
    x.expected_energy_saving_pct = e.at("expected_energy_saving_pct").get<double>();
    x.expected_throughput_loss_pct = e.at("expected_throughput_loss_pct").get<double>();
    x.provenance = e.at("provenance").get<std::vector<std::string>>();
    if (x.batch_lo > x.batch_hi || x.context_lo > x.context_hi)
      throw Error(Errc::config_error, "policy entry with an empty band: " + x.describe());
    p.entries.push_back(x);
  }
  for (const auto& o : j.at("omitted"))
    p.omitted.push_back({o.at("architecture").get<std::string>(), o.at("reason").get<std::string>()});
  return p;
}

inline ClockPolicy import_policy(const std::string& text) {
  try {
    return policy_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_error, std::string("policy file: ") + e.what());
  }
}

}  // namespace phasewatt
