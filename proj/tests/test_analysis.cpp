// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "phasewatt/metrics.hpp"
#include "support.hpp"

using namespace phasewatt;

namespace {

std::vector<ParetoPoint> brute_frontier(const std::vector<ParetoPoint>& pts) {
  std::vector<ParetoPoint> out;
  for (const auto& p : pts) {
    bool dom = false;
    for (const auto& q : pts) dom = dom || dominates(q, p);
    if (!dom) out.push_back(p);
  }
  std::sort(out.begin(), out.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    return std::tie(a.throughput, a.efficiency, a.label) < std::tie(b.throughput, b.efficiency, b.label);
  });
  return out;
}

std::vector<ParetoPoint> random_set(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n(1, 50);
  std::uniform_int_distribution<int> coarse(1, 10);  // coarse grid forces ties
  std::uniform_real_distribution<double> fine(0.1, 100.0);
  const bool tied = rng() % 2;
  std::vector<ParetoPoint> pts;
  const int k = n(rng);
  for (int i = 0; i < k; ++i)
    pts.push_back({tied ? double(coarse(rng)) : fine(rng), tied ? double(coarse(rng)) : fine(rng), "p" + std::to_string(i)});
  return pts;
}

const DeviceSpec& spec() { return test::calibrated().spec; }

// Reference cap sweep, caps ascending 280..700 W: (clock MHz, power W) per row.
std::vector<CapRow> table_rows(const std::string& arch) {
  const std::vector<double> caps{280, 420, 500, 600, 700};
  std::vector<CapRow> rows;
  for (double c : caps) {
    if (arch == "GQA") rows.push_back({c, c == 420 ? 1590 : 1830, c == 420 ? 200.0 : 207.0});
    if (arch == "GDN") rows.push_back({c, 1830, 167.0});
    if (arch == "MLA") rows.push_back({c, 1830, c == 420 ? 230.0 : 231.0});
  }
  return rows;
}

AggregatedPoint agg_point(const std::string& arch, int batch, Mhz lock, double mj, double tps) {
  AggregatedPoint a;
  a.config = {arch, Phase::decode, batch, 1024, 16, {lock, std::nullopt}};
  a.config_id = a.config.id();
  a.median_mj_per_tok = mj;
  a.median_tok_per_s = tps;
  a.median_power_w = mj * tps / 1e3;
  a.actual_clock_mhz = std::min<Mhz>(lock, 1830);
  a.n = 1;
  return a;
}

}  // namespace

TEST(Pareto, WorkedExample) {
  const auto f = pareto_frontier({{10, 5, "a"}, {9, 6, "b"}, {8, 4, "c"}});
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].label, "b");
  EXPECT_EQ(f[1].label, "a");
  EXPECT_TRUE(dominates({10, 5, ""}, {8, 4, ""}));
  EXPECT_FALSE(dominates({10, 5, ""}, {10, 5, ""}));
  EXPECT_THROW(pareto_frontier({{0, 1, "z"}}), Error);
}

TEST(Pareto, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int it = 0; it < 500; ++it) {
    const auto pts = random_set(rng);
    EXPECT_EQ(pareto_frontier(pts), brute_frontier(pts)) << it;
  }
}

TEST(Pareto, InvariantUnderPermutationAndDuplication) {
  std::mt19937_64 rng(12);
  for (int it = 0; it < 200; ++it) {
    auto pts = random_set(rng);
    const auto f = pareto_frontier(pts);
    std::shuffle(pts.begin(), pts.end(), rng);
    EXPECT_EQ(pareto_frontier(pts), f);
    // duplicating a point keeps the frontier's membership
    auto dup = pts;
    dup.push_back(pts[rng() % pts.size()]);
    const auto fd = pareto_frontier(dup);
    std::set<std::string> a, b;
    for (const auto& p : f) a.insert(p.label);
    for (const auto& p : fd) b.insert(p.label);
    EXPECT_EQ(a, b);
    for (const auto& p : fd)
      for (const auto& q : dup) EXPECT_FALSE(dominates(q, p));
  }
}

TEST(Dominance, IdenticalSetsAreNotDominated) {
  const std::vector<ParetoPoint> s{{100, 5, "x"}, {101, 5.02, "y"}};
  const auto v = dominance_verdict(s, s);
  EXPECT_FALSE(v.dominated);
  EXPECT_TRUE(v.degenerate);
}

TEST(Dominance, LockAheadBeyondMargin) {
  const std::vector<ParetoPoint> locks{{100, 10, "lock=780"}, {120, 8, "lock=1590"}};
  const std::vector<ParetoPoint> caps{{119, 7.0, "cap=500"}, {119.5, 7.05, "cap=700"}};
  const auto v = dominance_verdict(locks, caps);
  EXPECT_TRUE(v.dominated);
  EXPECT_TRUE(v.degenerate);
  ASSERT_EQ(v.witnesses.size(), 2u);
  for (const auto& w : v.witnesses) EXPECT_EQ(w.lock_point->label, "lock=1590");
  // within the noise margin is not dominance
  EXPECT_FALSE(dominance_verdict({{100, 10.05, "l"}}, {{100, 10, "c"}}).dominated);
  EXPECT_THROW(dominance_verdict({}, caps), Error);
}

TEST(Inertness, ReferenceCapSweeps) {
  for (const char* arch : {"GQA", "GDN", "MLA"}) {
    const auto v = detect_cap_inertness(table_rows(arch), spec());
    EXPECT_EQ(v.kind, InertnessKind::inert) << arch;
    if (std::string(arch) == "GQA") {
      ASSERT_EQ(v.anomalies.size(), 1u);
      EXPECT_EQ(v.anomalies[0].row.cap_w, 420);
      EXPECT_EQ(v.anomalies[0].row.clock_mhz, 1590);
      EXPECT_EQ(v.anomalies[0].row.power_w, 200);
      EXPECT_TRUE(v.anomalies[0].throttling_artefact);
    } else {
      EXPECT_TRUE(v.anomalies.empty()) << arch;
    }
  }
}

TEST(Inertness, IdenticalRowsAreInert) {
  std::vector<CapRow> rows;
  for (double c : {300.0, 400.0, 500.0}) rows.push_back({c, 1830, 250});
  const auto v = detect_cap_inertness(rows, spec());
  EXPECT_EQ(v.kind, InertnessKind::inert);
  EXPECT_TRUE(v.anomalies.empty());
  EXPECT_THROW(detect_cap_inertness({rows[0]}, spec()), Error);
}

TEST(Inertness, BindingCapsAreEngaged) {
  const auto& m = test::calibrated();
  const auto& terms = m.power.at("GQA", Phase::decode);
  const double u = 1.25;
  std::vector<CapRow> rows;
  for (double cap : {120.0, 150.0, 180.0, 210.0}) {
    DvfsState s;
    s.configured_cap_w = cap;
    s.actual_clock_mhz = m.spec.base_clock_mhz;
    s = cap_resolution(m.spec, terms, s, u);
    rows.push_back({cap, s.actual_clock_mhz, simulated_power(m.spec, terms, s.actual_clock_mhz, u)});
  }
  EXPECT_EQ(detect_cap_inertness(rows, m.spec).kind, InertnessKind::engaged);
}

TEST(Clamp, ReferencePairs) {
  const auto r = detect_clock_clamp({{1980, 1830}, {1830, 1830}, {1590, 1590}, {1185, 1185}, {780, 780}, {390, 390}});
  EXPECT_TRUE(r.clamped);
  EXPECT_EQ(r.ceiling_mhz, 1830);
  EXPECT_EQ(r.honoured, (std::vector<Mhz>{390, 780, 1185, 1590}));
  EXPECT_EQ(r.honoured_max_mhz, 1590);
  ASSERT_EQ(r.clamped_pairs.size(), 1u);
  EXPECT_EQ(r.clamped_pairs[0].requested, 1980);
}

TEST(Clamp, AllHonoured) {
  const auto r = detect_clock_clamp({{780, 780}, {1185, 1185}, {1590, 1590}});
  EXPECT_FALSE(r.clamped);
  EXPECT_EQ(r.honoured_max_mhz, 1590);
  EXPECT_EQ(r.honoured.size(), 3u);
  EXPECT_THROW(detect_clock_clamp({}), Error);
}

TEST(ClockMap, FlatEnergyPicksLowestClock) {
  std::vector<AggregatedPoint> pts;
  for (Mhz c : {390, 780, 1185}) pts.push_back(agg_point("X", 1, c, 50.0, 100.0));
  const auto map = optimal_clock_map(pts, {390, 780, 1185}, 0.01);
  ASSERT_EQ(map.size(), 1u);
  EXPECT_EQ(map.begin()->second.min_energy_clock, 390);
  EXPECT_EQ(map.begin()->second.budget_clock, 390);
  EXPECT_EQ(map.begin()->second.reference_clock, 1185);
}

TEST(ClockMap, BudgetAgainstReference) {
  std::vector<AggregatedPoint> pts{agg_point("X", 1, 390, 60, 80), agg_point("X", 1, 780, 40, 98.5),
                                   agg_point("X", 1, 1185, 45, 99.5), agg_point("X", 1, 1590, 50, 100)};
  const auto m1 = optimal_clock_map(pts, {390, 780, 1185, 1590}, 0.01);
  EXPECT_EQ(m1.begin()->second.budget_clock, 1185);
  EXPECT_EQ(m1.begin()->second.min_energy_clock, 780);
  const auto m5 = optimal_clock_map(pts, {390, 780, 1185, 1590}, 0.05);
  EXPECT_EQ(m5.begin()->second.budget_clock, 780);
  EXPECT_THROW(m5.begin()->second.at(1980), Error);
}

TEST(ClockMap, MissingLevelIsIncomplete) {
  std::vector<AggregatedPoint> pts{agg_point("X", 1, 390, 60, 80), agg_point("X", 1, 780, 40, 98)};
  try {
    optimal_clock_map(pts, {390, 780, 1185}, 0.01);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::incomplete_cell);
  }
}

TEST(Classify, ThreeClasses) {
  const std::vector<Mhz> lv{390, 780, 1185, 1590, 1980};
  EXPECT_EQ(classify_dvfs({{1, 780}, {8, 780}, {32, 780}}, lv).kind, DvfsClassKind::batch_invariant);
  EXPECT_EQ(classify_dvfs({{1, 780}, {8, 1185}, {32, 1590}}, lv).kind, DvfsClassKind::batch_sensitive);
  EXPECT_EQ(classify_dvfs({{1, 390}, {8, 390}, {32, 390}}, lv).kind, DvfsClassKind::compute_light);
  EXPECT_EQ(classify_dvfs({{1, 1590}, {8, 1980}, {32, 1980}}, lv).kind, DvfsClassKind::unclassified);
  EXPECT_THROW(classify_dvfs({{1, 780}}, lv), Error);
  EXPECT_THROW(classify_dvfs({{1, 777}, {2, 780}}, lv), Error);
}

TEST(Classify, InvariantToLevelRelabelling) {
  std::mt19937_64 rng(3);
  const std::vector<Mhz> lv{390, 780, 1185, 1590, 1980};
  for (int it = 0; it < 200; ++it) {
    std::vector<std::pair<int, Mhz>> row;
    std::vector<std::pair<int, Mhz>> relabelled;
    // any strictly increasing relabelling of the levels
    std::vector<Mhz> other{100, 200, 300, 400, 500};
    for (int k = 0; k < 5; ++k) other[k] += static_cast<Mhz>(rng() % 50) + 60 * k;
    for (int b : {1, 2, 4, 8, 16, 32}) {
      const int i = static_cast<int>(rng() % 5);
      row.emplace_back(b, lv[i]);
      relabelled.emplace_back(b, other[i]);
    }
    auto shuffled = row;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto k = classify_dvfs(row, lv).kind;
    EXPECT_EQ(classify_dvfs(relabelled, other).kind, k);
    EXPECT_EQ(classify_dvfs(shuffled, lv).kind, k);
  }
}

TEST(Crossover, FindsInterpolatedThreshold) {
  const Curve a{"A", {1, 2, 3, 4}, {10, 8, 6, 4}};
  const Curve b{"B", {1, 2, 3, 4}, {5, 6, 7, 8}};
  const auto r = find_crossover(a, b, CrossoverAxis::context, 32);
  ASSERT_TRUE(r.threshold);
  // 10-5=5, 8-6=2, 6-7=-1: crossing between x=2 and x=3 at 2 + 2/3
  EXPECT_NEAR(*r.threshold, 2.0 + 2.0 / 3.0, 1e-12);
  EXPECT_EQ(r.lower_after, "A");
  const auto s = find_crossover(b, a, CrossoverAxis::context, 32);
  EXPECT_NEAR(*s.threshold, *r.threshold, 1e-12);
  EXPECT_EQ(s.lower_after, "A");
}

TEST(Crossover, NoneWhenAlwaysAbove) {
  const Curve a{"A", {1, 2, 3}, {10, 10, 10}};
  const Curve b{"B", {1, 2, 3}, {1, 2, 3}};
  EXPECT_FALSE(find_crossover(a, b, CrossoverAxis::output_tokens).threshold);
  const Curve c{"C", {1, 2, 4}, {1, 2, 3}};
  try {
    find_crossover(a, c, CrossoverAxis::context);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::axis_mismatch);
  }
}

TEST(Crossover, SymmetricOnRandomCurves) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> y(0, 10);
  for (int it = 0; it < 300; ++it) {
    Curve a{"A", {}, {}}, b{"B", {}, {}};
    for (int i = 0; i < 8; ++i) {
      a.x.push_back(i * 100);
      b.x.push_back(i * 100);
      a.y.push_back(y(rng));
      b.y.push_back(y(rng));
    }
    const auto r = find_crossover(a, b, CrossoverAxis::context);
    const auto s = find_crossover(b, a, CrossoverAxis::context);
    ASSERT_EQ(r.threshold.has_value(), s.threshold.has_value());
    if (r.threshold) {
      EXPECT_NEAR(*r.threshold, *s.threshold, 1e-9);
      EXPECT_EQ(r.lower_after, s.lower_after);
    }
  }
}

TEST(RequestEnergy, AffineInOutputLength) {
  const auto c = request_energy_curve("X", 32, 16384, 1980, 780, 0.3, 100.0, {0, 500, 1000, 3000});
  EXPECT_NEAR(c.curve.y[0], 0.3 * 16384 * 1e-3, 1e-12);
  const double s1 = (c.curve.y[2] - c.curve.y[1]) / 500;
  const double s2 = (c.curve.y[3] - c.curve.y[2]) / 2000;
  EXPECT_NEAR(s1, s2, 1e-12);
  EXPECT_NEAR(s1, 0.1, 1e-12);
  EXPECT_THROW(total_request_energy(1, 1, 1, -1), Error);
  EXPECT_EQ(default_output_lengths(128, 64), (std::vector<int>{0, 64, 128}));
}

TEST(SweepBands, PrefillGapBetweenRecurrentAndAttention) {
  const auto& s = test::default_sweep();
  const auto& gqa = s.map_1pct.at({"GQA", Phase::prefill, 32, 16384});
  const auto& mamba = s.map_1pct.at({"Mamba2", Phase::prefill, 32, 16384});
  const double ratio = mamba.at(1980).mj_per_tok / gqa.at(1980).mj_per_tok;
  EXPECT_GT(ratio, 10.0);  // order of magnitude
  // decode at long context favours the recurrent model
  EXPECT_LT(s.map_1pct.at({"Mamba2", Phase::decode, 32, 65536}).at(1980).mj_per_tok,
            s.map_1pct.at({"GQA", Phase::decode, 32, 65536}).at(1980).mj_per_tok);
}

TEST(SweepBands, ClampVisibleInSweep) {
  const auto& s = test::default_sweep();
  const auto r = detect_clock_clamp(clock_pairs(s.agg.points));
  EXPECT_TRUE(r.clamped);
  EXPECT_EQ(r.ceiling_mhz, 1830);
  EXPECT_EQ(r.honoured_max_mhz, 1590);
}

TEST(SweepBands, DecodeCapsInertAtSimulatedDraw) {
  const auto& s = test::default_sweep();
  for (const auto& [k, rows] : cap_rows(s.agg.points)) {
    if (k.phase != Phase::decode) continue;
    EXPECT_EQ(detect_cap_inertness(rows, spec()).kind, InertnessKind::inert)
        << k.architecture << " b=" << k.batch << " ctx=" << k.context;
  }
}
