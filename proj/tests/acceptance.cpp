// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>

#include "phasewatt/policy.hpp"
#include "support.hpp"

using namespace phasewatt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool ok = true;
  std::string detail;
  void check(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

int failures = 0;

void report(const std::string& name, const Outcome& o, const std::string& info) {
  std::cout << (o.ok ? "PASS " : "FAIL ") << name << "  " << info;
  if (!o.ok) std::cout << "  [" << o.detail << "]";
  std::cout << std::endl;
  if (!o.ok) ++failures;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

PowerTrace linear_trace(std::mt19937_64& rng, double a, double b, int n) {
  std::uniform_real_distribution<double> dt(0.01, 0.1);
  PowerTrace tr;
  double t = 0.0;
  for (int i = 0; i < n; ++i) {
    tr.append({t, a + b * t, 0, 0});
    t += dt(rng);
  }
  return tr;
}

// --- 1 ---------------------------------------------------------------------
void integrator() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int it = 0; it < 1000; ++it) {
    const double a = 50 + 600 * u(rng);
    const double b = (it % 2) ? 0.0 : 20 * (u(rng) - 0.5);  // alternate constant and linear; stays positive over 10 s
    const auto tr = linear_trace(rng, std::max(a, 150.0), b, 20 + it % 80);
    const double lo = tr.start_time(), hi = tr.end_time();
    const double s = lo + (hi - lo) * 0.4 * u(rng);
    const double e = hi - (hi - lo) * 0.4 * u(rng);
    const double m = s + (e - s) * u(rng);
    const double pa = std::max(a, 150.0);
    const double exact = pa * (e - s) + 0.5 * b * (e * e - s * s);
    const double got = integrate_energy(tr, {Phase::decode, s, e, {}, {}});
    worst = std::max(worst, std::abs(got - exact) / exact);
    // additivity
    const double left = integrate_energy(tr, {Phase::decode, s, m, {}, {}});
    const double right = integrate_energy(tr, {Phase::decode, m, e, {}, {}});
    if (std::abs(left + right - got) > 1e-9 * got) o.check(false, "additivity at trace " + std::to_string(it));
    // scaling
    PowerTrace scaled;
    const double k = 0.5 + 3 * u(rng);
    for (const auto& smp : tr.samples()) scaled.append({smp.timestamp_s, k * smp.power_w, 0, 0});
    const double gs = integrate_energy(scaled, {Phase::decode, s, e, {}, {}});
    if (std::abs(gs - k * got) > 1e-9 * gs) o.check(false, "scaling at trace " + std::to_string(it));
  }
  const double secs = seconds_since(t0);
  o.check(worst < 1e-12, "relative error " + fmt(worst));
  o.check(secs < 1.0, "runtime " + fmt(secs) + " s");
  report("1 integrator exactness", o, "1000 traces, max rel err " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s");
}

// --- 2 ---------------------------------------------------------------------
void fallback() {
  Outcome o;
  PowerTrace tr;
  for (int i = 0; i <= 100; ++i) tr.append({i * 0.01, 300.0, 0, 0});
  auto win = [&](double s, double e, std::optional<double> counter) {
    return PhaseWindow{Phase::decode, s, e, 250.0, counter};
  };
  const auto short_m = energy_with_fallback(tr, win(0.1, 0.19, {}));
  o.check(short_m.method == EnergyMethod::snapshot_fallback, "90 ms window not on snapshot");
  o.check(std::abs(short_m.energy_j - 250.0 * 0.09) < 1e-9, "snapshot energy");
  const auto edge = energy_with_fallback(tr, win(0.2, 0.3, {}));
  o.check(edge.method == EnergyMethod::trapezoid, "100 ms window not on trapezoid");
  o.check(std::abs(edge.energy_j - 30.0) < 1e-9, "trapezoid energy");
  // counter 3% off: flagged only for windows of at least 200 ms
  const auto w150 = win(0.1, 0.25, 300.0 * 0.15 * 1.03);
  const auto c150 = cross_validate(energy_with_fallback(tr, w150), w150);
  o.check(c150.validation == CounterValidation::counter_unavailable, "150 ms window validated");
  const auto w200 = win(0.1, 0.3, 300.0 * 0.2 * 1.03);
  const auto c200 = cross_validate(energy_with_fallback(tr, w200), w200);
  o.check(c200.validation == CounterValidation::counter_disagrees, "200 ms window with 3% gap not flagged");
  const auto w500 = win(0.1, 0.6, 300.0 * 0.5 * 1.015);
  const auto c500 = cross_validate(energy_with_fallback(tr, w500), w500);
  o.check(c500.validation == CounterValidation::counter_agrees, "1.5% gap flagged");
  o.check(c500.energy_j == 150.0 || std::abs(c500.energy_j - 150.0) < 1e-9, "counter replaced the estimate");
  report("2 fallback rule", o, "snapshot < 100 ms, trapezoid >= 100 ms, counter check >= 200 ms at 2%");
}

// --- 3 ---------------------------------------------------------------------
void cap_fixtures() {
  Outcome o;
  const auto& spec = test::calibrated().spec;
  const std::vector<double> caps{280, 420, 500, 600, 700};
  std::vector<std::string> info;
  for (const std::string arch : {"GQA", "GDN", "MLA"}) {
    std::vector<CapRow> rows;
    for (double c : caps) {
      if (arch == "GQA") rows.push_back({c, c == 420 ? 1590 : 1830, c == 420 ? 200.0 : 207.0});
      if (arch == "GDN") rows.push_back({c, 1830, 167.0});
      if (arch == "MLA") rows.push_back({c, 1830, c == 420 ? 230.0 : 231.0});
    }
    const auto v = detect_cap_inertness(rows, spec);
    o.check(v.kind == InertnessKind::inert, arch + " verdict " + to_string(v.kind));
    const std::size_t want = arch == "GQA" ? 1 : 0;
    o.check(v.anomalies.size() == want, arch + " anomalies " + std::to_string(v.anomalies.size()));
    if (arch == "GQA" && v.anomalies.size() == 1) {
      const auto& a = v.anomalies[0];
      o.check(a.row.cap_w == 420 && a.row.clock_mhz == 1590 && a.row.power_w == 200, "GQA anomaly row");
      o.check(a.throttling_artefact, "GQA anomaly not tagged as throttling");
    }
    info.push_back(arch + "=" + to_string(v.kind));
  }
  report("3 cap inertness fixtures", o, join(info, " ") + ", one throttling anomaly (GQA 420 W)");
}

// --- 4 ---------------------------------------------------------------------
void clamp() {
  Outcome o;
  const auto r = detect_clock_clamp({{1980, 1830}, {1830, 1830}, {1590, 1590}, {1185, 1185}, {780, 780}, {390, 390}});
  o.check(r.clamped, "no clamp");
  o.check(r.ceiling_mhz == 1830, "ceiling " + std::to_string(r.ceiling_mhz));
  o.check(r.honoured_max_mhz && *r.honoured_max_mhz <= 1590, "honoured max above 1590");
  for (Mhz c : r.honoured) o.check(c <= 1590, "honoured " + std::to_string(c));
  report("4 clock clamp", o, "ceiling " + std::to_string(r.ceiling_mhz) + " MHz, honoured max " +
                                 (r.honoured_max_mhz ? std::to_string(*r.honoured_max_mhz) : "none"));
}

// --- 5 ---------------------------------------------------------------------
void pareto() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> n(1, 50), coarse(1, 8);
  std::uniform_real_distribution<double> fine(0.1, 100.0);
  for (int it = 0; it < 500; ++it) {
    std::vector<ParetoPoint> pts;
    const int k = n(rng);
    for (int i = 0; i < k; ++i)
      pts.push_back(it % 3 == 0 ? ParetoPoint{double(coarse(rng)), double(coarse(rng)), std::to_string(i)}
                                : ParetoPoint{fine(rng), fine(rng), std::to_string(i)});
    std::vector<ParetoPoint> brute;
    for (const auto& p : pts) {
      bool dom = false;
      for (const auto& q : pts) dom = dom || dominates(q, p);
      if (!dom) brute.push_back(p);
    }
    std::sort(brute.begin(), brute.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
      return std::tie(a.throughput, a.efficiency, a.label) < std::tie(b.throughput, b.efficiency, b.label);
    });
    if (pareto_frontier(pts) != brute) o.check(false, "mismatch on set " + std::to_string(it));
  }
  const double secs = seconds_since(t0);
  o.check(secs < 5.0, "runtime " + fmt(secs) + " s");
  report("5 pareto oracle", o, "500 sets, " + fmt(secs, 3) + " s");
}

// --- 6 ---------------------------------------------------------------------
void bands() {
  const auto t0 = Clock::now();
  const auto& s = test::default_sweep();
  const auto& grid = s.grid;
  const auto& map = s.map_1pct;
  std::map<std::string, std::vector<const AggregatedPoint*>> cells;  // decode cell -> points
  for (const auto& p : s.agg.points)
    if (p.config.phase == Phase::decode)
      cells[p.config.architecture + "/" + std::to_string(p.config.batch) + "/" + std::to_string(p.config.context)]
          .push_back(&p);
  std::cout << "     default sweep: " << s.agg.points.size() << " aggregates in " << fmt(seconds_since(t0), 3) << " s"
            << std::endl;

  {  // a
    Outcome o;
    double worst_tp = 0, lo_pw = INFINITY, hi_pw = 0;
    for (const auto& [k, c] : map) {
      if (k.phase != Phase::decode) continue;
      const auto& a = c.at(1590);
      const auto& b = c.at(1980);
      const double tp = std::abs(b.tok_per_s / a.tok_per_s - 1.0);
      const double pw = b.power_w / a.power_w - 1.0;
      worst_tp = std::max(worst_tp, tp);
      lo_pw = std::min(lo_pw, pw);
      hi_pw = std::max(hi_pw, pw);
    }
    o.check(worst_tp < 0.005, "throughput delta " + fmt(100 * worst_tp) + "%");
    o.check(lo_pw >= 0.05 && hi_pw <= 0.15, "power delta " + fmt(100 * lo_pw) + "-" + fmt(100 * hi_pw) + "%");
    report("6a 1590 vs 1980 decode", o, "max throughput delta " + fmt(100 * worst_tp, 3) + "%, power delta " +
                                            fmt(100 * lo_pw, 3) + "-" + fmt(100 * hi_pw, 3) + "% over all decode cells");
  }
  {  // b
    Outcome o;
    std::vector<std::string> info;
    for (const auto& arch : grid.architectures) {
      const auto& c = map.at({arch, Phase::decode, 1, 1024});
      const double saving = 1.0 - c.at(780).mj_per_tok / c.at(1980).mj_per_tok;
      o.check(saving >= 0.20 && saving <= 0.35, arch + " saving " + fmt(100 * saving) + "%");
      info.push_back(arch + " " + fmt(100 * saving, 3) + "%");
      if (arch == "GDN") {
        const double w = c.at(780).power_w;
        o.check(std::abs(w - 117.0) <= 11.7, "GDN power " + fmt(w) + " W");
        info.push_back("GDN " + fmt(w, 4) + " W");
      }
    }
    report("6b 780 MHz saving", o, join(info, ", "));
  }
  {  // c
    Outcome o;
    int dominated = 0, degenerate = 0;
    for (const auto& [k, pts] : cells) {
      std::vector<ParetoPoint> locks, caps;
      for (const auto* p : pts) {
        if (p->config.lever() == Lever::lock) locks.push_back(pareto_point(*p));
        if (p->config.lever() == Lever::cap) caps.push_back(pareto_point(*p));
      }
      const auto v = dominance_verdict(locks, caps);
      dominated += v.dominated;
      degenerate += v.degenerate;
      if (!v.dominated) o.check(false, k + " not dominated");
      if (!v.degenerate) o.check(false, k + " caps not degenerate");
    }
    report("6c lock dominates cap", o, std::to_string(dominated) + "/" + std::to_string(cells.size()) +
                                           " dominated, " + std::to_string(degenerate) + " degenerate");
  }
  {  // d
    Outcome o;
    const auto classes = classify_all(map, grid.clocks);
    const std::map<std::string, DvfsClassKind> want{{"GQA", DvfsClassKind::batch_invariant},
                                                    {"GQA-ctrl", DvfsClassKind::batch_invariant},
                                                    {"MLA", DvfsClassKind::batch_sensitive},
                                                    {"Mamba2", DvfsClassKind::batch_sensitive},
                                                    {"GDN", DvfsClassKind::compute_light}};
    std::vector<std::string> info;
    for (const auto& [arch, kind] : want) {
      const auto got = classes.at(arch).kind;
      o.check(got == kind, arch + " is " + to_string(got));
      info.push_back(arch + "=" + to_string(got));
    }
    report("6d DVFS classes", o, join(info, " "));
  }
  {  // e
    Outcome o;
    const auto at32 = find_crossover(context_curve(map, "MLA", 32, 1980), context_curve(map, "GQA-ctrl", 32, 1980),
                                     CrossoverAxis::context, 32);
    const auto at1 = find_crossover(context_curve(map, "MLA", 1, 1980), context_curve(map, "GQA-ctrl", 1, 1980),
                                    CrossoverAxis::context, 1);
    o.check(at32.threshold && *at32.threshold >= 2048 && *at32.threshold <= 8192,
            "BS32 threshold " + (at32.threshold ? fmt(*at32.threshold) : std::string("none")));
    o.check(at32.lower_after == "MLA", "MLA not lower past the crossover");
    o.check(!at1.threshold, "BS1 crossover at " + (at1.threshold ? fmt(*at1.threshold) : std::string("")));
    report("6e MLA vs GQA-ctrl context crossover", o,
           "BS32 at " + (at32.threshold ? fmt(*at32.threshold, 5) : std::string("none")) + " tokens, BS1 " +
               (at1.threshold ? fmt(*at1.threshold, 5) : std::string("none")));
  }
  {  // f
    Outcome o;
    const auto& m5 = s.map_5pct;
    auto curve = [&](const std::string& arch) {
      const Mhz dec = m5.at({arch, Phase::decode, 32, 16384}).budget_clock;
      return request_energy_curve(m5, arch, 32, 16384, 1980, dec, default_output_lengths(4096, 16));
    };
    const auto mamba = curve("Mamba2");
    const auto gqa = curve("GQA");
    const auto r = find_crossover(mamba.curve, gqa.curve, CrossoverAxis::output_tokens, 32);
    o.check(r.threshold && *r.threshold >= 500 && *r.threshold <= 2000,
            "threshold " + (r.threshold ? fmt(*r.threshold) : std::string("none")));
    o.check(r.lower_after == "Mamba2", "Mamba2 not lower past the crossover");
    report("6f Mamba2 vs GQA request energy", o,
           "crossover at " + (r.threshold ? fmt(*r.threshold, 5) : std::string("none")) + " output tokens (decode " +
               std::to_string(mamba.decode_clock) + "/" + std::to_string(gqa.decode_clock) + " MHz)");
  }
  {  // g
    Outcome o;
    auto ratio = [&](const std::string& arch) {
      return map.at({arch, Phase::decode, 32, 16384}).at(1980).mj_per_tok /
             map.at({arch, Phase::decode, 32, 4096}).at(1980).mj_per_tok;
    };
    const double g = ratio("GQA"), m = ratio("MLA"), s2 = ratio("Mamba2");
    o.check(g >= 2.0 && g <= 2.5, "GQA " + fmt(g));
    o.check(m >= 1.3 && m <= 1.55, "MLA " + fmt(m));
    o.check(s2 >= 1.05 && s2 <= 1.25, "Mamba2 " + fmt(s2));
    report("6g 4K->16K decode growth", o, "GQA " + fmt(g) + ", MLA " + fmt(m) + ", Mamba2 " + fmt(s2));
  }
  {  // h
    Outcome o;
    const double f = map.at({"GQA", Phase::decode, 1, 1024}).at(1980).mj_per_tok /
                     map.at({"GQA", Phase::decode, 32, 1024}).at(1980).mj_per_tok;
    o.check(f > 15.0, "factor " + fmt(f));
    report("6h GQA batch amortisation", o, "BS1/BS32 = " + fmt(f) + "x");
  }
}

// --- 7 ---------------------------------------------------------------------
void determinism() {
  Outcome o;
  SweepGrid g;
  g.architectures = {"GQA", "MLA", "Mamba2"};
  g.batches = {1, 8};
  g.contexts = {1024, 16384};
  g.repetitions = 5;
  g.warmup = 2;
  g.output_len = 32;
  const auto configs = plan(g);
  ExecuteOptions opt;
  opt.seed = 7;
  opt.repetitions = g.repetitions;
  opt.warmup = g.warmup;

  auto run_quiet = [&] {
    SimulatorOptions so;
    so.noise_sigma = 0.0;
    auto sim = test::make_sim(so);
    MemorySink sink;
    execute(configs, sim, sink, opt);
    std::string text;
    for (const auto& r : sink.records()) text += record_to_json(r).dump() + "\n";
    return text;
  };
  const auto a = run_quiet();
  const auto b = run_quiet();
  o.check(a == b, "sigma=0 sweeps differ");

  std::string uninterrupted;
  {
    auto sim = test::make_sim();
    MemorySink sink;
    execute(configs, sim, sink, opt);
    for (const auto& r : sink.records()) uninterrupted += record_to_json(r).dump() + "\n";
  }
  test::TempDir dir("accept");
  const auto file = dir.path() / "records.ndjson";
  int kills = 0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto sim = test::make_sim();
    NdjsonSink sink(file);
    auto o2 = opt;
    int polls = 0;
    const int limit = 37 + attempt * 11;
    o2.should_stop = [&] { return ++polls > limit; };
    const auto summary = execute(configs, sim, sink, o2);
    if (!summary.stopped) break;
    ++kills;
    // leave a torn line behind, as a hard kill mid-write would
    std::ofstream(file, std::ios::app | std::ios::binary) << "{\"schema_version\":1,\"conf";
  }
  const auto resumed = read_text(file);
  o.check(kills > 0, "sweep never interrupted");
  o.check(resumed == uninterrupted, "resumed record set differs from uninterrupted");
  report("7 determinism and resume", o,
         std::to_string(configs.size() * g.repetitions) + " records, sigma=0 identical, " + std::to_string(kills) +
             " kills then byte-identical resume");
}

// --- 8 ---------------------------------------------------------------------
void policy_round_trip() {
  Outcome o;
  const auto& s = test::default_sweep();
  const auto policy = synthesize(classify_all(s.map_1pct, s.grid.clocks), s.map_1pct, 0.01, test::calibrated().spec);
  const auto text = export_policy(policy);
  const auto back = import_policy(text);
  o.check(back == policy, "import differs from synthesised policy");
  o.check(export_policy(back) == text, "re-export differs");
  auto sim = test::make_sim();
  int honoured = 0, diverged = 0;
  for (const auto& e : back.entries) {
    std::ostringstream log;
    const auto r = apply(back, sim, e.architecture, e.phase, e.batch_lo, e.context_lo, &log);
    if (!r.entry || !(*r.entry == e)) o.check(false, "lookup returned another entry for " + e.describe());
    if (e.lock_mhz < 1830) {
      ++honoured;
      if (r.state.actual_clock_mhz != e.lock_mhz || r.diverged) o.check(false, e.describe() + " not honoured");
    } else {
      const bool logged = log.str().find("DIVERGED") != std::string::npos;
      diverged += logged;
      if (e.lock_mhz > 1830 && !logged) o.check(false, e.describe() + " divergence not logged");
      if (r.state.actual_clock_mhz != 1830) o.check(false, e.describe() + " actual not at base clock");
    }
  }
  report("8 policy round trip", o, std::to_string(back.entries.size()) + " entries, " + std::to_string(honoured) +
                                       " honoured exactly, " + std::to_string(diverged) + " divergences logged");
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const std::vector<std::pair<const char*, void (*)()>> steps{
      {"1", integrator}, {"2", fallback}, {"3", cap_fixtures}, {"4", clamp},
      {"5", pareto},     {"6", bands},    {"7", determinism},  {"8", policy_round_trip}};
  for (const auto& [id, fn] : steps) {
    try {
      fn();
    } catch (const std::exception& e) {
      std::cout << "FAIL " << id << "  exception: " << e.what() << std::endl;
      ++failures;
    }
  }
  std::cout << "total " << fmt(seconds_since(t0), 3) << " s, " << failures << " failure(s)" << std::endl;
  return failures == 0 ? 0 : 1;
}
