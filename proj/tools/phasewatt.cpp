// SPDX-License-Identifier: Apache-2.0
// phasewatt: command-line entry point for calibration, sweeps, analysis and policies.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "phasewatt/analysis.hpp"
#include "phasewatt/backend.hpp"
#include "phasewatt/config.hpp"
#include "phasewatt/orchestrator.hpp"
#include "phasewatt/policy.hpp"
#include "phasewatt/real_backend.hpp"
#include "phasewatt/report.hpp"

namespace fs = std::filesystem;
using namespace phasewatt;

namespace {

struct Globals {
  std::string config = "data/config.json";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string backend;
  std::optional<double> noise;
};

struct Context {
  ToolConfig cfg;
  std::uint64_t seed = 0;
  fs::path out_dir;
  std::string backend;

  ArtifactMeta meta() const { return {kToolVersion, seed, cfg.hash()}; }
};

Context make_context(const Globals& g) {
  Context c;
  c.cfg = load_tool_config(g.config);
  if (g.noise) c.cfg.simulator.noise_sigma = *g.noise;
  c.seed = g.seed.value_or(c.cfg.seed);
  c.out_dir = g.out.empty() ? c.cfg.out_dir : fs::path(g.out);
  c.backend = g.backend.empty() ? c.cfg.backend : g.backend;
  return c;
}

std::unique_ptr<Backend> make_backend(const Context& c) {
  if (c.backend == "sim") {
    auto model = calibrate_model(c.cfg);
    return std::make_unique<SimulatedBackend>(c.cfg.device, model.power.params, model.fit.profiles, c.cfg.simulator);
  }
  if (c.backend == "real") {
    RealBackendConfig rc = c.cfg.real.get<RealBackendConfig>();
    rc.spec = c.cfg.device;
    return std::make_unique<RealBackend>(rc);
  }
  throw Error(Errc::invalid_argument, "unknown backend '" + c.backend + "' (expected sim or real)");
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error(Errc::config_error, "cannot write " + p.string());
  return os;
}

void write_json(const fs::path& p, const nlohmann::json& j) { open_out(p) << j.dump(2) << '\n'; }

fs::path records_file(const std::string& arg) {
  fs::path p(arg);
  return fs::is_directory(p) ? p / "records.ndjson" : p;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

AggregateSet load_aggregates(const std::string& records_arg, int reps) {
  const auto recs = read_records_file(records_file(records_arg));
  if (reps <= 0) {
    std::map<std::string, int> count;
    for (const auto& r : recs)
      if (r.ok()) reps = std::max(reps, ++count[r.config_id]);
  }
  return aggregate_all(recs, std::max(reps, 1));
}

std::vector<Mhz> swept_locks(const std::vector<AggregatedPoint>& pts) {
  std::set<Mhz> s;
  for (const auto& p : pts)
    if (p.config.control.lock_mhz) s.insert(*p.config.control.lock_mhz);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------

int cmd_calibrate(const Context& c, const std::string& targets, const std::string& fixtures,
                  const std::string& profiles) {
  const fs::path tp = targets.empty() ? c.cfg.targets_path : fs::path(targets);
  const fs::path fp = fixtures.empty() ? c.cfg.fixtures_path : fs::path(fixtures);
  const fs::path pp = profiles.empty() ? c.cfg.profiles_path : fs::path(profiles);
  auto model = calibrate_model(c.cfg.device, fp, pp, tp, /*strict=*/false);
  {
    auto os = open_out(c.out_dir / "residuals.csv");
    write_residuals_csv(os, c.meta(), model.fit, model.power);
  }
  if (!model.fit.conflicts.empty())
    throw Error(Errc::calibration_conflict,
                "targets not simultaneously satisfiable (see residuals.csv):\n  " + join(model.fit.conflicts, "\n  "));
  nlohmann::json pj = model.power.params;
  write_json(c.out_dir / "power_params.json", {{"meta", meta_json(c.meta())}, {"power_terms", pj}});
  auto prof = profiles_to_json(model.fit.profiles);
  prof["meta"] = meta_json(c.meta());
  write_json(c.out_dir / "profiles.json", prof);
  std::cout << "calibrated " << model.fit.profiles.size() << " profiles; " << model.fit.residuals.size()
            << " targets within tolerance; outputs in " << c.out_dir.string() << "\n";
  return 0;
}

int cmd_sweep(const Context& c, const std::string& grid_path, bool resume, int reps) {
  SweepGrid grid = read_json(grid_path).get<SweepGrid>();
  if (reps > 0) grid.repetitions = reps;
  grid.validate();
  const auto configs = plan(grid);
  const fs::path rec = c.out_dir / "records.ndjson";
  if (fs::exists(rec) && !resume)
    throw Error(Errc::config_error, rec.string() + " exists; pass --resume to continue it or choose another --out");
  auto backend = make_backend(c);
  NdjsonSink sink(rec);
  ExecuteOptions opt;
  opt.seed = c.seed;
  opt.repetitions = grid.repetitions;
  opt.warmup = grid.warmup;
  if (backend->id() != "sim") opt.timestamp = utc_now;
  const auto summary = execute(configs, *backend, sink, opt);

  nlohmann::json failures = nlohmann::json::array();
  for (const auto& [id, msg] : summary.failures) failures.push_back({{"config_id", id}, {"error", msg}});
  nlohmann::json grid_json = grid;
  write_json(c.out_dir / "summary.json", {{"meta", meta_json(c.meta())},
                                          {"grid", grid_json},
                                          {"grid_hash", hex64(fnv1a64(grid_json.dump()))},
                                          {"backend", backend->metadata()},
                                          {"configs_total", summary.configs_total},
                                          {"configs_completed", summary.configs_completed},
                                          {"configs_skipped", summary.configs_skipped},
                                          {"records_written", summary.records_written},
                                          {"failures", failures}});
  std::cout << summary.configs_completed << "/" << summary.configs_total << " configs complete ("
            << summary.configs_skipped << " resumed, " << summary.records_written << " records written, "
            << summary.failures.size() << " failed)\n";
  return summary.failures.empty() ? 0 : 1;
}

void report_aggregates(const Context& c, const AggregateSet& a, const fs::path& out) {
  auto os = open_out(out);
  write_aggregates_csv(os, c.meta(), a.points);
}

void report_frontier(const Context& c, const AggregateSet& a, const fs::path& out) {
  auto os = open_out(out);
  write_frontier_csv(os, c.meta(), a.points);
}

void report_inertness(const Context& c, const AggregateSet& a, const fs::path& out) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [k, rows] : cap_rows(a.points)) {
    if (rows.size() < 2) continue;
    auto j = inertness_json(detect_cap_inertness(rows, c.cfg.device));
    j["architecture"] = k.architecture;
    j["phase"] = to_string(k.phase);
    j["batch"] = k.batch;
    j["context"] = k.context;
    cells.push_back(j);
  }
  write_json(out, {{"meta", meta_json(c.meta())}, {"cells", cells}});
}

void report_clamp(const Context& c, const AggregateSet& a, const fs::path& out) {
  const auto pairs = clock_pairs(a.points);
  auto j = clamp_json(detect_clock_clamp(pairs));
  // wasted band between the two highest swept locks, per decode cell
  const auto locks = swept_locks(a.points);
  nlohmann::json bands = nlohmann::json::array();
  if (locks.size() >= 2) {
    std::map<CellKey, std::map<Mhz, const AggregatedPoint*>> cells;
    for (const auto& p : a.points)
      if (p.config.control.lock_mhz)
        cells[{p.config.architecture, p.config.phase, p.config.batch, p.config.context}][*p.config.control.lock_mhz] = &p;
    const Mhz hi = locks.back(), lo = locks[locks.size() - 2];
    for (const auto& [k, m] : cells)
      if (m.count(hi) && m.count(lo)) {
        const auto w = wasted_band(*m.at(lo), *m.at(hi));
        bands.push_back({{"architecture", k.architecture}, {"phase", to_string(k.phase)}, {"batch", k.batch},
                         {"context", k.context}, {"lower_lock_mhz", lo}, {"higher_lock_mhz", hi},
                         {"throughput_delta", w.throughput_delta}, {"power_delta", w.power_delta}});
      }
  }
  j["wasted_band"] = bands;
  j["meta"] = meta_json(c.meta());
  write_json(out, j);
}

void report_clockmap(const Context& c, const AggregateSet& a, double budget, const fs::path& out) {
  const auto map = optimal_clock_map(a.points, swept_locks(a.points), budget);
  auto os = open_out(out);
  write_clock_map_csv(os, c.meta(), map, budget);
}

void report_classes(const Context& c, const AggregateSet& a, double budget, const fs::path& out) {
  const auto locks = swept_locks(a.points);
  const auto map = optimal_clock_map(a.points, locks, budget);
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [arch, cls] : classify_all(map, locks)) classes[arch] = dvfs_class_json(cls);
  write_json(out, {{"meta", meta_json(c.meta())}, {"loss_budget", budget}, {"classes", classes}});
}

void report_dominance(const Context& c, const AggregateSet& a, const fs::path& out) {
  std::map<CellKey, std::pair<std::vector<ParetoPoint>, std::vector<ParetoPoint>>> cells;
  for (const auto& p : a.points) {
    auto& cell = cells[{p.config.architecture, p.config.phase, p.config.batch, p.config.context}];
    if (p.config.control.lock_mhz) cell.first.push_back(pareto_point(p));
    if (p.config.control.cap_w) cell.second.push_back(pareto_point(p));
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [k, sets] : cells) {
    if (sets.first.empty() || sets.second.empty()) continue;
    const auto v = dominance_verdict(sets.first, sets.second);
    rows.push_back({{"architecture", k.architecture}, {"phase", to_string(k.phase)}, {"batch", k.batch},
                    {"context", k.context}, {"verdict", v.dominated ? "dominated" : "not_dominated"},
                    {"degenerate", v.degenerate}, {"min_margin", v.min_margin}});
  }
  write_json(out, {{"meta", meta_json(c.meta())}, {"cells", rows}});
}

void report_crossover(const Context& c, const AggregateSet& a, double budget, const fs::path& out) {
  const auto locks = swept_locks(a.points);
  const auto map = optimal_clock_map(a.points, locks, budget);
  std::set<std::string> archs;
  std::set<int> batches;
  for (const auto& [k, _] : map) {
    archs.insert(k.architecture);
    batches.insert(k.batch);
  }
  nlohmann::json reports = nlohmann::json::array();
  for (auto i = archs.begin(); i != archs.end(); ++i)
    for (auto j = std::next(i); j != archs.end(); ++j)
      for (int b : batches) {
        const auto ca = context_curve(map, *i, b, locks.back());
        const auto cb = context_curve(map, *j, b, locks.back());
        if (ca.x.size() < 3 || ca.x != cb.x) continue;
        reports.push_back(crossover_json(find_crossover(ca, cb, CrossoverAxis::context, b)));
      }
  write_json(out, {{"meta", meta_json(c.meta())}, {"reference_lock_mhz", locks.back()}, {"crossovers", reports}});
}

void report_request_energy(const Context& c, const AggregateSet& a, double budget, const fs::path& out) {
  const auto locks = swept_locks(a.points);
  const auto map = optimal_clock_map(a.points, locks, budget);
  std::vector<RequestEnergyCurve> curves;
  for (const auto& [k, cell] : map) {
    if (k.phase != Phase::decode || !map.count({k.architecture, Phase::prefill, k.batch, k.context})) continue;
    const Mhz pre = map.at({k.architecture, Phase::prefill, k.batch, k.context}).reference_clock;
    for (Mhz dec : {cell.budget_clock, cell.min_energy_clock})
      curves.push_back(request_energy_curve(map, k.architecture, k.batch, k.context, pre, dec, default_output_lengths()));
  }
  auto os = open_out(out);
  write_request_energy_csv(os, c.meta(), curves);
}

int cmd_analyze(const Context& c, const std::string& records, const std::string& kind, const std::string& out,
                double budget, int reps) {
  const auto agg = load_aggregates(records, reps);
  const fs::path target = out.empty() ? c.out_dir / "reports" : fs::path(out);
  using Fn = std::function<void(const fs::path&)>;
  const std::vector<std::tuple<std::string, std::string, Fn>> kinds{
      {"aggregates", "aggregates.csv", [&](const fs::path& p) { report_aggregates(c, agg, p); }},
      {"frontier", "frontier.csv", [&](const fs::path& p) { report_frontier(c, agg, p); }},
      {"dominance", "dominance.json", [&](const fs::path& p) { report_dominance(c, agg, p); }},
      {"inertness", "inertness.json", [&](const fs::path& p) { report_inertness(c, agg, p); }},
      {"clamp", "clamp.json", [&](const fs::path& p) { report_clamp(c, agg, p); }},
      {"clockmap", "clockmap.csv", [&](const fs::path& p) { report_clockmap(c, agg, budget, p); }},
      {"classes", "classes.json", [&](const fs::path& p) { report_classes(c, agg, budget, p); }},
      {"crossover", "crossover.json", [&](const fs::path& p) { report_crossover(c, agg, budget, p); }},
      {"request-energy", "request_energy.csv", [&](const fs::path& p) { report_request_energy(c, agg, budget, p); }},
  };
  if (kind == "all") {
    nlohmann::json files = nlohmann::json::array();
    for (const auto& [name, file, fn] : kinds) {
      fn(target / file);
      files.push_back(file);
    }
    write_json(target / "manifest.json", {{"meta", meta_json(c.meta())}, {"records", records}, {"files", files}});
    std::cout << "wrote " << kinds.size() << " reports to " << target.string() << "\n";
    return 0;
  }
  // alternative names for the figure-shaped reports
  const std::map<std::string, std::string> aliases{
      {"pareto", "frontier"}, {"heatmap", "clockmap"}, {"total-energy", "request-energy"}};
  const std::string wanted = aliases.count(kind) ? aliases.at(kind) : kind;
  for (const auto& [name, file, fn] : kinds)
    if (name == wanted) {
      fn(target);
      std::cout << "wrote " << target.string() << "\n";
      return 0;
    }
  throw Error(Errc::invalid_argument, "unknown report kind '" + kind + "'");
}

int cmd_policy_synth(const Context& c, const std::string& records, double budget, const std::string& out, int reps) {
  const auto agg = load_aggregates(records, reps);
  const auto locks = swept_locks(agg.points);
  const auto map = optimal_clock_map(agg.points, locks, budget);
  auto policy = synthesize(classify_all(map, locks), map, budget, c.cfg.device);
  policy.seed = c.seed;
  policy.config_hash = c.cfg.hash();
  const fs::path target = out.empty() ? c.out_dir / "policy.json" : fs::path(out);
  open_out(target) << export_policy(policy);
  for (const auto& o : policy.omitted) std::cerr << "omitted " << o.architecture << ": " << o.reason << "\n";
  std::cout << "wrote " << policy.entries.size() << " entries to " << target.string() << "\n";
  return 0;
}

int cmd_policy_apply(const Context& c, const std::string& file, const std::string& arch, const std::string& phase,
                     int batch, int context) {
  const auto policy = import_policy(read_text(file));
  auto backend = make_backend(c);
  const auto r = apply(policy, *backend, arch, phase_from_string(phase), batch, context, &std::cout);
  return r.state.actual_clock_mhz > 0 ? 0 : 1;
}

int cmd_simulate(const Context& c, const std::string& arch, const std::string& phase, int batch, int context,
                 int output_len, std::optional<int> lock, std::optional<double> cap, const std::string& trace_out) {
  auto backend = make_backend(c);
  WorkloadRequest req{arch, {phase_from_string(phase), batch, context, output_len}, {lock, cap}, c.seed};
  const auto res = backend->run(req);
  const auto m = cross_validate(energy_with_fallback(res.trace, res.window), res.window);
  nlohmann::json j{{"meta", meta_json(c.meta())},
                   {"architecture", arch},
                   {"phase", phase},
                   {"batch", batch},
                   {"context", context},
                   {"output_len", output_len},
                   {"control", req.control.describe()},
                   {"actual_clock_mhz", res.observed_state.actual_clock_mhz},
                   {"cap_engaged", res.observed_state.cap_engaged},
                   {"tokens", res.tokens_processed},
                   {"wall_time_s", res.wall_time_s},
                   {"energy_j", m.energy_j},
                   {"energy_method", to_string(m.method)},
                   {"counter_validation", to_string(m.validation)},
                   {"mj_per_tok", energy_per_token(m.energy_j, res.tokens_processed)},
                   {"tok_per_s", res.tokens_processed / res.wall_time_s}};
  std::cout << j.dump(2) << "\n";
  if (!trace_out.empty()) {
    auto os = open_out(trace_out);
    write_meta_line(os, c.meta());
    write_trace_csv(os, res.trace);
  }
  return 0;
}

int cmd_roofline(const Context& c, const std::string& out) {
  const auto model = calibrate_model(c.cfg);
  const fs::path target = out.empty() ? c.out_dir / "roofline.csv" : fs::path(out);
  auto os = open_out(target);
  write_meta_line(os, c.meta());
  os << "architecture,phase,batch,context,flops,bytes,intensity,class\n";
  for (const auto& [name, p] : model.fit.profiles)
    for (Phase ph : {Phase::prefill, Phase::decode})
      for (int b : {1, 2, 4, 8, 16, 32})
        for (int ctx : {1024, 4096, 16384, 65536}) {
          const PhasePoint pt{ph, b, ctx, 1};
          const double f = phase_flops(p, pt), by = phase_traffic(p, pt);
          const double ai = arithmetic_intensity(f, by);
          os << name << ',' << to_string(ph) << ',' << b << ',' << ctx << ',' << format_double(f) << ','
             << format_double(by) << ',' << format_double(ai) << ',' << to_string(classify_roofline(ai, c.cfg.device))
             << '\n';
        }
  std::cout << "wrote " << target.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phasewatt: phase-aware GPU energy characterisation and clock policies"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "tool config file")->capture_default_str();
  app.add_option("--seed", g.seed, "global seed (overrides the config)");
  app.add_option("--out", g.out, "output directory (overrides the config)");
  app.add_option("--backend", g.backend, "backend: sim or real")->check(CLI::IsMember({"sim", "real"}));
  app.add_option("--noise", g.noise, "simulator power noise sigma")->check(CLI::NonNegativeNumber);

  std::function<int()> action;

  auto* cal = app.add_subcommand("calibrate", "fit power terms and profiles to the calibration targets");
  std::string targets, fixtures, profiles;
  cal->add_option("--targets", targets, "calibration target CSV");
  cal->add_option("--fixtures", fixtures, "power fixture CSV");
  cal->add_option("--profiles", profiles, "seed profile file");
  cal->callback([&] { action = [&] { return cmd_calibrate(make_context(g), targets, fixtures, profiles); }; });

  auto* sweep = app.add_subcommand("sweep", "plan and execute a sweep grid");
  std::string grid;
  bool resume = false;
  int reps = 0;
  sweep->add_option("--grid", grid, "grid file")->required();
  sweep->add_flag("--resume", resume, "continue an interrupted sweep in --out");
  sweep->add_option("--reps", reps, "repetitions per config (1-20)")->check(CLI::Range(1, kMaxRepetitions));
  sweep->callback([&] { action = [&] { return cmd_sweep(make_context(g), grid, resume, reps); }; });

  auto* an = app.add_subcommand("analyze", "derive reports from sweep records");
  std::string records, kind = "all", report_out;
  double budget = 0.01;
  int areps = 0;
  an->add_option("--records", records, "records file or sweep output directory")->required();
  an->add_option("--report", kind, "aggregates|frontier (pareto)|dominance|inertness|clamp|clockmap (heatmap)|classes|crossover|request-energy (total-energy)|all")
      ->capture_default_str();
  an->add_option("--out", report_out, "report file (directory for 'all')");
  an->add_option("--budget", budget, "throughput loss budget")->capture_default_str()->check(CLI::PositiveNumber);
  an->add_option("--reps", areps, "required repetitions per config (default: most seen)");
  an->callback([&] { action = [&] { return cmd_analyze(make_context(g), records, kind, report_out, budget, areps); }; });

  auto* pol = app.add_subcommand("policy", "synthesise or apply static clock policies");
  pol->require_subcommand(1);
  auto* synth = pol->add_subcommand("synth", "synthesise a policy from sweep records");
  std::string precords, pout;
  double pbudget = 0.01;
  int preps = 0;
  synth->add_option("--records", precords, "records file or sweep output directory")->required();
  synth->add_option("--budget", pbudget, "throughput loss budget")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--out", pout, "policy file");
  synth->add_option("--reps", preps, "required repetitions per config (default: most seen)");
  synth->callback([&] { action = [&] { return cmd_policy_synth(make_context(g), precords, pbudget, pout, preps); }; });

  auto* ap = pol->add_subcommand("apply", "apply a policy entry through a backend");
  std::string pfile, parch, pphase = "decode";
  int pbatch = 1, pctx = 1024;
  ap->add_option("--file", pfile, "policy file")->required();
  ap->add_option("--arch", parch, "architecture")->required();
  ap->add_option("--phase", pphase, "prefill or decode")->capture_default_str();
  ap->add_option("--batch", pbatch, "batch size")->capture_default_str();
  ap->add_option("--context", pctx, "context tokens")->capture_default_str();
  ap->callback([&] { action = [&] { return cmd_policy_apply(make_context(g), pfile, parch, pphase, pbatch, pctx); }; });

  auto* sim = app.add_subcommand("simulate", "run one workload request and report its energy");
  std::string sarch, sphase = "decode", strace;
  int sbatch = 1, sctx = 1024, slen = 128;
  std::optional<int> slock;
  std::optional<double> scap;
  sim->add_option("--arch", sarch, "architecture")->required();
  sim->add_option("--phase", sphase, "prefill or decode")->capture_default_str();
  sim->add_option("--batch", sbatch, "batch size")->capture_default_str();
  sim->add_option("--context", sctx, "context tokens")->capture_default_str();
  sim->add_option("--output-len", slen, "decode steps")->capture_default_str();
  auto* lock_opt = sim->add_option("--lock", slock, "SM clock lock (MHz)");
  sim->add_option("--cap", scap, "power cap (W)")->excludes(lock_opt);
  sim->add_option("--trace", strace, "write the power trace CSV here");
  sim->callback([&] {
    action = [&] { return cmd_simulate(make_context(g), sarch, sphase, sbatch, sctx, slen, slock, scap, strace); };
  });

  auto* roof = app.add_subcommand("roofline", "arithmetic intensity of every profile over the default grid");
  std::string rout;
  roof->add_option("--out", rout, "CSV file");
  roof->callback([&] { action = [&] { return cmd_roofline(make_context(g), rout); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code_of(ErrorFamily::usage);
  }
  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_of(e.family());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: ConfigError: " << e.what() << "\n";
    return exit_code_of(ErrorFamily::config);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: ConfigError: " << e.what() << "\n";
    return exit_code_of(ErrorFamily::config);
  }
}
