// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "phasewatt/backend.hpp"
#include "phasewatt/error.hpp"
#include "phasewatt/metrics.hpp"
#include "phasewatt/telemetry.hpp"
#include "phasewatt/util.hpp"

namespace phasewatt {

inline constexpr int kRecordSchemaVersion = 1;
inline constexpr int kMaxRepetitions = 20;

struct SweepGrid {
  std::vector<std::string> architectures{"GQA", "GQA-ctrl", "MLA", "GDN", "Mamba2"};
  std::vector<Phase> phases{Phase::prefill, Phase::decode};
  std::vector<Mhz> clocks{390, 780, 1185, 1590, 1980};
  std::vector<double> caps{280, 420, 500, 600, 700};
  bool free_run = true;
  std::vector<int> batches{1, 2, 4, 8, 16, 32};
  std::vector<int> contexts{1024, 4096, 16384, 65536};
  int repetitions = 10;
  int warmup = 3;
  int output_len = 128;

  void validate() const {
    if (repetitions < 1 || repetitions > kMaxRepetitions)
      throw Error(Errc::config_error, "repetitions must lie in [1, " + std::to_string(kMaxRepetitions) + "]");
    if (warmup < 1) throw Error(Errc::config_error, "warmup must be >= 1");
    if (output_len < 1) throw Error(Errc::config_error, "output_len must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const SweepGrid& g) {
  std::vector<std::string> phases;
  for (auto p : g.phases) phases.push_back(to_string(p));
  j = nlohmann::json{{"architectures", g.architectures}, {"phases", phases},     {"clocks_mhz", g.clocks},
                     {"caps_w", g.caps},                 {"free_run", g.free_run}, {"batches", g.batches},
                     {"contexts", g.contexts},           {"repetitions", g.repetitions}, {"warmup", g.warmup},
                     {"output_len", g.output_len}};
}

inline void from_json(const nlohmann::json& j, SweepGrid& g) {
  g = SweepGrid{};
  g.architectures = j.value("architectures", g.architectures);
  if (j.contains("phases")) {
    g.phases.clear();
    for (const auto& p : j.at("phases")) g.phases.push_back(phase_from_string(p.get<std::string>()));
  }
  g.clocks = j.value("clocks_mhz", g.clocks);
  g.caps = j.value("caps_w", g.caps);
  g.free_run = j.value("free_run", g.free_run);
  g.batches = j.value("batches", g.batches);
  g.contexts = j.value("contexts", g.contexts);
  g.repetitions = j.value("repetitions", g.repetitions);
  g.warmup = j.value("warmup", g.warmup);
  g.output_len = j.value("output_len", g.output_len);
  g.validate();
}

enum class Lever { lock, cap, free };

inline const char* to_string(Lever l) {
  switch (l) {
    case Lever::lock: return "lock";
    case Lever::cap: return "cap";
    case Lever::free: return "free";
  }
  return "free";
}

inline Lever lever_from_string(const std::string& s) {
  if (s == "lock") return Lever::lock;
  if (s == "cap") return Lever::cap;
  if (s == "free") return Lever::free;
  throw Error(Errc::config_error, "unknown lever '" + s + "'");
}

struct SweepConfig {
  std::string architecture;
  Phase phase = Phase::decode;
  int batch = 1;
  int context = 1;
  int output_len = 0;  // 0 for prefill
  ControlRequest control;

  Lever lever() const { return control.lock_mhz ? Lever::lock : control.cap_w ? Lever::cap : Lever::free; }
  double lever_value() const { return control.lock_mhz ? *control.lock_mhz : control.cap_w ? *control.cap_w : 0.0; }
  PhasePoint point() const { return {phase, batch, context, output_len}; }

  /// Canonical text form; the config id hashes exactly this string.
  std::string canonical() const {
    return "arch=" + architecture + ";phase=" + to_string(phase) + ";batch=" + std::to_string(batch) +
           ";context=" + std::to_string(context) + ";output_len=" + std::to_string(output_len) +
           ";lever=" + to_string(lever()) + ":" + format_double(lever_value());
  }
  std::string id() const { return hex64(fnv1a64(canonical())); }

  /// Planning order: architecture-major as listed, then phase, batch, context, lever.
  auto cell_key() const { return std::make_tuple(architecture, static_cast<int>(phase), batch, context); }
};

/// Cartesian product of the grid, one lever per config: lock sweep, then cap sweep, then free-run.
inline std::vector<SweepConfig> plan(const SweepGrid& grid) {
  grid.validate();
  auto empty = [](const char* axis) { return Error(Errc::empty_grid, std::string("grid axis '") + axis + "' is empty"); };
  if (grid.architectures.empty()) throw empty("architectures");
  if (grid.phases.empty()) throw empty("phases");
  if (grid.batches.empty()) throw empty("batches");
  if (grid.contexts.empty()) throw empty("contexts");
  if (grid.clocks.empty() && grid.caps.empty() && !grid.free_run) throw empty("levers");

  std::vector<ControlRequest> levers;
  for (Mhz c : grid.clocks) levers.push_back({c, std::nullopt});
  for (double w : grid.caps) levers.push_back({std::nullopt, w});
  if (grid.free_run) levers.push_back({});

  std::vector<SweepConfig> out;
  for (const auto& arch : grid.architectures)
    for (Phase ph : grid.phases)
      for (int b : grid.batches)
        for (int ctx : grid.contexts)
          for (const auto& lv : levers)
            out.push_back({arch, ph, b, ctx, ph == Phase::decode ? grid.output_len : 0, lv});
  return out;
}

/// One measured repetition (or a failure marker), flattened for the NDJSON sink.
struct RunRecord {
  int schema_version = kRecordSchemaVersion;
  std::string config_id;
  SweepConfig config;
  int rep_index = 0;
  std::string status = "ok";  // "ok" or "failed"
  std::string error;
  long long tokens = 0;
  double wall_time_s = 0.0;
  EnergyMeasurement energy;
  DvfsState observed;
  double median_power_w = 0.0;
  double median_temperature_c = 0.0;
  std::string timestamp;
  std::string backend_id;
  std::uint64_t seed = 0;

  bool ok() const noexcept { return status == "ok"; }
  double mj_per_tok() const { return energy_per_token(energy.energy_j, tokens); }
  double tok_per_s() const { return static_cast<double>(tokens) / wall_time_s; }
};

inline nlohmann::json record_to_json(const RunRecord& r) {
  auto opt = [](const auto& o) { return o ? nlohmann::json(*o) : nlohmann::json(nullptr); };
  const auto& c = r.config;
  return nlohmann::json{{"schema_version", r.schema_version},
                        {"config_id", r.config_id},
                        {"architecture", c.architecture},
                        {"phase", to_string(c.phase)},
                        {"batch", c.batch},
                        {"context", c.context},
                        {"output_len", c.output_len},
                        {"lever", to_string(c.lever())},
                        {"lever_value", c.lever_value()},
                        {"rep_index", r.rep_index},
                        {"status", r.status},
                        {"error", r.error},
                        {"tokens", r.tokens},
                        {"wall_time_s", r.wall_time_s},
                        {"energy_j", r.energy.energy_j},
                        {"energy_method", to_string(r.energy.method)},
                        {"counter_validation", to_string(r.energy.validation)},
                        {"counter_gap", opt(r.energy.relative_gap)},
                        {"gap_bridged", r.energy.gap_bridged},
                        {"requested_lock_mhz", opt(r.observed.requested_lock_mhz)},
                        {"configured_cap_w", opt(r.observed.configured_cap_w)},
                        {"actual_clock_mhz", r.observed.actual_clock_mhz},
                        {"cap_engaged", r.observed.cap_engaged},
                        {"cap_floor_reached", r.observed.cap_floor_reached},
                        {"throttled", r.observed.throttled},
                        {"median_power_w", r.median_power_w},
                        {"median_temperature_c", r.median_temperature_c},
                        {"timestamp", r.timestamp},
                        {"backend", r.backend_id},
                        {"seed", r.seed}};
}

inline RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kRecordSchemaVersion)
    throw Error(Errc::config_error, "unsupported record schema_version " + std::to_string(r.schema_version));
  r.config_id = j.at("config_id").get<std::string>();
  auto& c = r.config;
  c.architecture = j.at("architecture").get<std::string>();
  c.phase = phase_from_string(j.at("phase").get<std::string>());
  c.batch = j.at("batch").get<int>();
  c.context = j.at("context").get<int>();
  c.output_len = j.at("output_len").get<int>();
  const Lever lv = lever_from_string(j.at("lever").get<std::string>());
  if (lv == Lever::lock) c.control.lock_mhz = static_cast<Mhz>(j.at("lever_value").get<double>());
  if (lv == Lever::cap) c.control.cap_w = j.at("lever_value").get<double>();
  r.rep_index = j.at("rep_index").get<int>();
  r.status = j.at("status").get<std::string>();
  r.error = j.value("error", "");
  r.tokens = j.at("tokens").get<long long>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.energy.energy_j = j.at("energy_j").get<double>();
  r.energy.method = energy_method_from_string(j.at("energy_method").get<std::string>());
  r.energy.validation = counter_validation_from_string(j.at("counter_validation").get<std::string>());
  if (!j.at("counter_gap").is_null()) r.energy.relative_gap = j.at("counter_gap").get<double>();
  r.energy.gap_bridged = j.at("gap_bridged").get<bool>();
  if (!j.at("requested_lock_mhz").is_null()) r.observed.requested_lock_mhz = j.at("requested_lock_mhz").get<Mhz>();
  if (!j.at("configured_cap_w").is_null()) r.observed.configured_cap_w = j.at("configured_cap_w").get<double>();
  r.observed.actual_clock_mhz = j.at("actual_clock_mhz").get<Mhz>();
  r.observed.cap_engaged = j.at("cap_engaged").get<bool>();
  r.observed.cap_floor_reached = j.at("cap_floor_reached").get<bool>();
  r.observed.throttled = j.at("throttled").get<bool>();
  r.median_power_w = j.at("median_power_w").get<double>();
  r.median_temperature_c = j.at("median_temperature_c").get<double>();
  r.timestamp = j.value("timestamp", "");
  r.backend_id = j.at("backend").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  if (r.config_id != c.id()) throw Error(Errc::config_error, "record config_id does not match its fields");
  return r;
}

inline bool operator==(const RunRecord& a, const RunRecord& b) { return record_to_json(a) == record_to_json(b); }

/// Append-only destination for run records.
class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual void append(const RunRecord& r) = 0;
  virtual const std::vector<RunRecord>& records() const = 0;
};

class MemorySink final : public RecordSink {
 public:
  void append(const RunRecord& r) override { records_.push_back(r); }
  const std::vector<RunRecord>& records() const override { return records_; }

 private:
  std::vector<RunRecord> records_;
};

/// Parses NDJSON records. A final line without a newline is a torn write and is dropped.
inline std::vector<RunRecord> read_records(std::istream& is, std::size_t* valid_bytes = nullptr) {
  std::vector<RunRecord> out;
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::size_t pos = 0, lineno = 0;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    if (nl == std::string::npos) break;
    ++lineno;
    const std::string line = trim(std::string_view(content).substr(pos, nl - pos));
    pos = nl + 1;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::config_error, "record line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (valid_bytes) *valid_bytes = pos;
  return out;
}

inline std::vector<RunRecord> read_records_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::config_error, "cannot open records file " + path.string());
  return read_records(is);
}

/// NDJSON file sink. Opening an existing file loads its records and truncates a
/// torn final line so that appends resume on a clean boundary.
class NdjsonSink final : public RecordSink {
 public:
  explicit NdjsonSink(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
      std::size_t valid = 0;
      {
        std::ifstream is(path_, std::ios::binary);
        records_ = read_records(is, &valid);
      }
      if (valid != std::filesystem::file_size(path_)) std::filesystem::resize_file(path_, valid);
    } else if (path_.has_parent_path()) {
      std::filesystem::create_directories(path_.parent_path());
    }
    os_.open(path_, std::ios::binary | std::ios::app);
    if (!os_) throw Error(Errc::config_error, "cannot open " + path_.string() + " for append");
  }

  void append(const RunRecord& r) override {
    os_ << record_to_json(r).dump() << '\n';
    os_.flush();
    records_.push_back(r);
  }
  const std::vector<RunRecord>& records() const override { return records_; }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
  std::vector<RunRecord> records_;
};

struct ExecuteOptions {
  std::uint64_t seed = 0;
  int repetitions = 10;
  int warmup = 3;
  /// Polled before every repetition; returning true stops the sweep (simulated kill).
  std::function<bool()> should_stop;
  /// Record timestamp source; empty leaves the field blank so simulated sweeps stay reproducible.
  std::function<std::string()> timestamp;
};

struct RunSummary {
  std::size_t configs_total = 0;
  std::size_t configs_completed = 0;  // including those already complete on entry
  std::size_t configs_skipped = 0;    // complete on entry
  std::size_t records_written = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // (config id, message)
  bool stopped = false;
};

inline std::uint64_t rep_seed(std::uint64_t global, const std::string& config_id, int rep) {
  return mix_seed(mix_seed(global, fnv1a64(config_id)), static_cast<std::uint64_t>(rep));
}

namespace detail {

inline RunRecord measure(const SweepConfig& cfg, int rep, const WorkloadResult& res, const std::string& backend_id,
                         std::uint64_t seed) {
  RunRecord r;
  r.config_id = cfg.id();
  r.config = cfg;
  r.rep_index = rep;
  r.tokens = res.tokens_processed;
  r.wall_time_s = res.wall_time_s;
  r.energy = cross_validate(energy_with_fallback(res.trace, res.window), res.window);
  r.observed = res.observed_state;
  std::vector<double> p, t;
  for (const auto& s : res.trace.samples())
    if (s.timestamp_s >= res.window.start_s && s.timestamp_s <= res.window.end_s) {
      p.push_back(s.power_w);
      t.push_back(s.temperature_c);
    }
  if (p.empty() && res.window.snapshot_power_w) p.push_back(*res.window.snapshot_power_w);
  r.median_power_w = p.empty() ? 0.0 : median(p);
  r.median_temperature_c = t.empty() ? 0.0 : median(t);
  r.backend_id = backend_id;
  r.seed = seed;
  return r;
}

}  // namespace detail

/// Runs every config: warmups (discarded) then repetitions, each appended to the sink
/// as it completes. Repetitions already in the sink are skipped, so an interrupted
/// sweep resumes where it stopped. A failing config is recorded and the sweep goes on.
inline RunSummary execute(const std::vector<SweepConfig>& configs, Backend& backend, RecordSink& sink,
                          const ExecuteOptions& opt) {
  if (opt.repetitions < 1 || opt.repetitions > kMaxRepetitions)
    throw Error(Errc::config_error, "repetitions must lie in [1, " + std::to_string(kMaxRepetitions) + "]");
  RunSummary summary;
  summary.configs_total = configs.size();

  std::map<std::string, std::set<int>> done;
  for (const auto& r : sink.records())
    if (r.ok()) done[r.config_id].insert(r.rep_index);

  for (const auto& cfg : configs) {
    const std::string id = cfg.id();
    auto& have = done[id];
    int missing = 0;
    for (int rep = 0; rep < opt.repetitions; ++rep) missing += have.count(rep) ? 0 : 1;
    if (missing == 0) {
      ++summary.configs_completed;
      ++summary.configs_skipped;
      continue;
    }
    if (opt.should_stop && opt.should_stop()) {
      summary.stopped = true;
      return summary;
    }
    try {
      backend.reset();
      WorkloadRequest req{cfg.architecture, cfg.point(), cfg.control, 0};
      for (int w = 0; w < opt.warmup; ++w) {
        req.seed = rep_seed(opt.seed, id, -1 - w);
        backend.run(req);
      }
      for (int rep = 0; rep < opt.repetitions; ++rep) {
        if (have.count(rep)) continue;
        if (opt.should_stop && opt.should_stop()) {
          summary.stopped = true;
          return summary;
        }
        req.seed = rep_seed(opt.seed, id, rep);
        auto rec = detail::measure(cfg, rep, backend.run(req), backend.id(), req.seed);
        if (opt.timestamp) rec.timestamp = opt.timestamp();
        sink.append(rec);
        have.insert(rep);
        ++summary.records_written;
      }
      ++summary.configs_completed;
    } catch (const Error& e) {
      RunRecord fail;
      fail.config_id = id;
      fail.config = cfg;
      fail.rep_index = -1;
      fail.status = "failed";
      fail.error = e.what();
      fail.backend_id = backend.id();
      fail.seed = opt.seed;
      if (opt.timestamp) fail.timestamp = opt.timestamp();
      sink.append(fail);
      summary.failures.emplace_back(id, e.what());
    }
  }
  return summary;
}

struct AggregatedPoint {
  std::string config_id;
  SweepConfig config;
  int n = 0;
  double median_mj_per_tok = 0.0;
  double stddev_mj_per_tok = 0.0;
  double median_tok_per_s = 0.0;
  double stddev_tok_per_s = 0.0;
  double median_power_w = 0.0;
  Mhz actual_clock_mhz = 0;  // median over repetitions
  bool cap_engaged = false;  // in a majority of repetitions
  int throttled_reps = 0;
  bool noisy = false;  // a stddev exceeds 3% of its median
};

/// Medians and spreads over the successful repetitions of one config.
inline AggregatedPoint aggregate(const std::vector<RunRecord>& records) {
  if (records.empty()) throw Error(Errc::invalid_argument, "aggregate needs at least one record");
  AggregatedPoint a;
  a.config_id = records.front().config_id;
  a.config = records.front().config;
  std::vector<double> e, tp, pw, clk;
  int engaged = 0;
  for (const auto& r : records) {
    if (r.config_id != a.config_id)
      throw Error(Errc::aggregation_mismatch, "records for " + a.config_id + " and " + r.config_id + " mixed");
    if (!r.ok()) continue;
    e.push_back(r.mj_per_tok());
    tp.push_back(r.tok_per_s());
    pw.push_back(r.median_power_w);
    clk.push_back(r.observed.actual_clock_mhz);
    engaged += r.observed.cap_engaged ? 1 : 0;
    a.throttled_reps += r.observed.throttled ? 1 : 0;
  }
  if (e.empty()) throw Error(Errc::invalid_argument, "no successful records for " + a.config_id);
  a.n = static_cast<int>(e.size());
  a.median_mj_per_tok = median(e);
  a.stddev_mj_per_tok = stddev(e);
  a.median_tok_per_s = median(tp);
  a.stddev_tok_per_s = stddev(tp);
  a.median_power_w = median(pw);
  a.actual_clock_mhz = static_cast<Mhz>(std::lround(median(clk)));
  a.cap_engaged = 2 * engaged > a.n;
  a.noisy = a.stddev_mj_per_tok > 0.03 * a.median_mj_per_tok || a.stddev_tok_per_s > 0.03 * a.median_tok_per_s;
  return a;
}

struct AggregateSet {
  std::vector<AggregatedPoint> points;        // planning order
  std::vector<std::string> incomplete;        // configs with fewer than the required repetitions
  std::vector<std::string> failed;            // configs whose last attempt failed
};

/// Groups records by config and aggregates those with at least `repetitions`
/// successful repetitions. Later duplicates of a repetition index are ignored.
inline AggregateSet aggregate_all(const std::vector<RunRecord>& records, int repetitions) {
  std::map<std::string, std::vector<RunRecord>> groups;
  std::map<std::string, std::set<int>> seen;
  std::set<std::string> failed;
  for (const auto& r : records) {
    if (!r.ok()) {
      failed.insert(r.config_id);
      continue;
    }
    if (!seen[r.config_id].insert(r.rep_index).second) continue;
    groups[r.config_id].push_back(r);
  }
  AggregateSet out;
  for (const auto& [id, recs] : groups) {
    if (static_cast<int>(recs.size()) < repetitions) {
      out.incomplete.push_back(id);
      continue;
    }
    failed.erase(id);
    out.points.push_back(aggregate(recs));
  }
  out.failed.assign(failed.begin(), failed.end());
  std::stable_sort(out.points.begin(), out.points.end(), [](const AggregatedPoint& a, const AggregatedPoint& b) {
    const auto ka = std::make_tuple(a.config.cell_key(), static_cast<int>(a.config.lever()), a.config.lever_value());
    const auto kb = std::make_tuple(b.config.cell_key(), static_cast<int>(b.config.lever()), b.config.lever_value());
    return ka < kb;
  });
  return out;
}

}  // namespace phasewatt
