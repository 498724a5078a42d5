"""Acceptance suite: one PASS/FAIL line per criterion.

Slow by design (several minutes on one core); run with ``pytest -v -s`` to see
the lines live. Each test also asserts, so failures show up in the summary.
"""
import math
import random
import statistics
import time
from collections import defaultdict

import numpy as np
import pytest

from isat.aggregator import EvaParams, FleetSlice, price_grid, revenue_curve, optimize_discharge_price
from isat.cli import main
from isat.consensus import (CRASH, EQUIVOCATE, FASTPATH, PBFT, BenchConfig, ConsensusConfig,
                            run_consensus)
from isat.market import BatteryModel, best_response, utility
from isat.orchestrator import (DATA_DIR, SLOTS_PER_DAY, UC, V2G, Scenario, TradeDay,
                               charge_price_reduction_pct)
from isat.simcore import MessageEnvelope, NetNode, NetParams, message_delay, propagation_ms, \
    transmission_ms

SEEDS = range(1, 6)


def line(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {tag}: {detail}")


def bench_means(nodes, faulty, protocols, duration_s=600.0):
    """Seed-averaged (latency, throughput, msgs/node/s) per (protocol, nodes, faulty)."""
    out = {}
    for proto in protocols:
        cfg = ConsensusConfig(protocol=proto)
        for n in nodes:
            for f in faulty:
                rows = [run_consensus(cfg, NetParams(), BenchConfig(
                    nodes=n, faulty=f, duration_s=duration_s, seed=s)).metrics for s in SEEDS]
                out[proto, n, f] = (statistics.fmean(m.mean_latency for m in rows),
                                    statistics.fmean(m.throughput for m in rows),
                                    statistics.fmean(m.msgs_per_node_per_s for m in rows))
    return out


# -- 1 -----------------------------------------------------------------------

def test_c1_scalability_ordering(capsys):
    nodes = list(range(12, 25, 2))
    t0 = time.perf_counter()
    m = bench_means(nodes, [0], [FASTPATH, PBFT])
    elapsed = time.perf_counter() - t0
    bad = []
    for n in nodes:
        fp, pb = m[FASTPATH, n, 0], m[PBFT, n, 0]
        if not (fp[0] < pb[0] and fp[1] >= pb[1] and fp[2] < pb[2]):
            bad.append(n)
    worst = max(m[FASTPATH, n, 0][0] / m[PBFT, n, 0][0] for n in nodes)
    ok = not bad and elapsed <= 300
    line(capsys, 1, ok, f"orderings hold for n={nodes[0]}..{nodes[-1]} except {bad}; "
         f"max latency ratio fp/pbft {worst:.4f}; {elapsed:.0f}s (limit 300s)")
    assert not bad
    assert elapsed <= 300


# -- 2 -----------------------------------------------------------------------

def test_c2_fast_path_latency(capsys):
    d = 2.0
    cfg = ConsensusConfig()
    res = run_consensus(cfg, NetParams(fixed_delay_ms=d), BenchConfig(nodes=7, duration_s=30, seed=1))
    t = res.trace
    times = [t.block_finalized[h] - t.block_started[h] for h in t.block_finalized]
    q = math.floor(2 * 7 / 3) + 1
    # leader builds, validators check PROPOSE and the block, then q-2 PREPAREs from others
    overhead = (cfg.block_creation_ms + cfg.message_validation_ms + cfg.block_validation_ms
                + (q - 2) * cfg.message_validation_ms)
    expect = 2 * d + overhead
    measured = statistics.fmean(times)
    ok = abs(measured - expect) <= 0.10 * expect and res.trace.round_changes == 0
    line(capsys, 2, ok, f"mean block finalization {measured:.4f} ms vs 2d+overhead {expect:.4f} ms "
         f"over {len(times)} blocks")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c3_robustness_trend(capsys):
    m = bench_means([15], [0, 1, 2], [FASTPATH, PBFT])
    lat_ok = all(m[p, 15, 0][0] <= m[p, 15, 1][0] <= m[p, 15, 2][0] for p in (FASTPATH, PBFT))

    def drop(p, f):
        return 1 - m[p, 15, f][1] / m[p, 15, 0][1]

    deg_ok = all(drop(FASTPATH, f) >= drop(PBFT, f) for f in (1, 2))
    lat = {p: [round(m[p, 15, f][0], 3) for f in (0, 1, 2)] for p in (FASTPATH, PBFT)}
    deg = {p: [round(drop(p, f), 5) for f in (1, 2)] for p in (FASTPATH, PBFT)}
    line(capsys, 3, lat_ok and deg_ok, f"latency by f {lat}; throughput drop at f=1,2 {deg}")
    assert lat_ok and deg_ok


# -- 4 -----------------------------------------------------------------------

def test_c4_safety_and_liveness(capsys):
    rng = random.Random(2024)
    conflicts = stalls = runs = 0
    for k in range(1000):
        n = rng.randint(4, 13)
        f = rng.randint(0, (n - 1) // 3)
        mode = CRASH if k % 2 == 0 else EQUIVOCATE
        proto = FASTPATH if (k // 2) % 2 == 0 else PBFT
        res = run_consensus(ConsensusConfig(protocol=proto), NetParams(),
                            BenchConfig(nodes=n, faulty=f, fault_mode=mode, duration_s=2.0,
                                        tx_rate_per_node=2.0, seed=rng.randrange(2**31)))
        runs += 1
        honest = [s for s in res.nodes if s.id not in res.faults.faulty]
        top = min(s.chain.height for s in honest)
        split = any(len({s.chain.blocks[h].digest for s in honest}) > 1 for h in range(1, top + 1))
        if res.trace.conflicts or split:
            conflicts += 1
        if mode == CRASH and max(s.chain.height for s in honest) < 1:
            stalls += 1
    ok = conflicts == 0 and stalls == 0
    line(capsys, 4, ok, f"{runs} runs, {conflicts} with conflicting finalized blocks, "
         f"{stalls} crash runs without chain growth")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c5_market_oracle(capsys):
    rng = np.random.default_rng(5)
    grid = np.round(np.linspace(-1, 1, 20001), 12)
    worst_gap = 0.0
    disagree = 0
    count = 10_000
    w = rng.uniform(0.1, 10, count)
    a = rng.uniform(1e-3, 2, count)
    p_c = rng.uniform(0.05, 3, count)
    p_d = -rng.uniform(0, 3, count) * p_c
    for lo in range(0, count, 200):
        sl = slice(lo, lo + 200)
        u = utility(grid[None, :], w[sl, None], a[sl, None], p_c[sl, None], p_d[sl, None])
        best_grid = u.max(axis=1)
        for k, i in enumerate(range(lo, min(lo + 200, count))):
            r = best_response(w[i], a[i], p_c[i], p_d[i], mode="rules")
            g = best_response(w[i], a[i], p_c[i], p_d[i], mode="argmax")
            ur = utility(r.x, w[i], a[i], p_c[i], p_d[i])
            worst_gap = max(worst_gap, best_grid[k] - ur)
            if r.mode != g.mode or abs(r.x - g.x) > 1e-12:
                disagree += 1
    ok = worst_gap <= 1e-6 and disagree == 0
    line(capsys, 5, ok, f"{count} instances; worst grid-max minus best_response utility "
         f"{worst_gap:.3e}; rule/argmax disagreements {disagree}")
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_c6_optimizer_dominance(capsys):
    rng = np.random.default_rng(6)
    params, battery = EvaParams(), BatteryModel()
    not_dominant = off_fine = 0
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 60))
        fleet = FleetSlice([f"e{k}" for k in range(n)], rng.uniform(0.05, 1.0, n),
                           rng.choice([24.0, 40.0, 64.0, 100.0, 160.0], n), np.full(n, 0.81))
        p_rt = float(rng.choice([0.26, 0.66, 1.12]))
        e_limit = float(rng.uniform(0, 20))
        p_star = optimize_discharge_price(fleet, p_rt, e_limit, params, battery)
        coarse = price_grid(params.p_d_min(p_rt), 0.0, 0.01)
        rc = revenue_curve(coarse, fleet, p_rt, e_limit, params, battery)
        r_star = revenue_curve(np.array([p_star]), fleet, p_rt, e_limit, params, battery)[0]
        if np.any(rc > r_star + 1e-12):
            not_dominant += 1
        fine = price_grid(params.p_d_min(p_rt), 0.0, 0.001)
        rf = revenue_curve(fine, fleet, p_rt, e_limit, params, battery)
        k = int(np.argmax(rf))
        window = rf[max(0, k - 10):k + 11]  # one coarse step either side of the fine optimum
        step_r = window.max() - window.min()
        gap = rf.max() - r_star
        worst = max(worst, gap - step_r)
        if gap > step_r + 1e-12:
            off_fine += 1
    ok = not_dominant == 0 and off_fine == 0
    line(capsys, 6, ok, f"100 slots; {not_dominant} beaten on the grid; {off_fine} outside one "
         f"step of the 10x finer optimum (worst excess {worst:.3e})")
    assert ok


# -- 7 -----------------------------------------------------------------------

class DayProbe:
    """Runs one TradeDay slot by slot, keeping SoC and per-slot cash checks."""

    def __init__(self, sc, scheme, fleet=None):
        self.day = TradeDay(sc, scheme, fleet)
        self.soc_min, self.soc_max = 1.0, 0.0
        while self.day.next_slot < self.day.horizon:
            self.day.run_slot(self.day.next_slot)
            for s in self.day.plugged(self.day.next_slot - 1):
                soc = s.energy / s.ev.capacity
                self.soc_min, self.soc_max = min(self.soc_min, soc), max(self.soc_max, soc)
        self.report = self.day.run()

    def cash_gap(self):
        deltas = defaultdict(float)
        for w in self.day.wallets.values():
            for _, slot, delta, _ in w.history:
                deltas[slot] += delta
        worst = 0.0
        for rec in self.day.records:
            o = rec.outcome
            flow = o.c_v2g - (o.p_real_time * o.charged_kwh + o.r_service)
            worst = max(worst, abs(deltas[o.slot] - flow))
        return worst


@pytest.fixture(scope="module")
def case_study():
    t0 = time.perf_counter()
    small = Scenario.load()
    out = {s: DayProbe(small, s) for s in (V2G, UC)}
    big = Scenario.load(DATA_DIR / "scenario_bootstrap.json")
    fleet = big.fleet()
    out["big"] = {s: DayProbe(big, s, fleet) for s in (V2G, UC)}
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_c7a_v2g_cheaper_charging(case_study, capsys):
    v, u = case_study[V2G].report, case_study[UC].report
    ok = v.avg_charge_price < u.avg_charge_price
    line(capsys, "7a", ok, f"avg charge price V2G {v.avg_charge_price:.4f} vs UC {u.avg_charge_price:.4f}")
    assert ok


def test_c7b_uc_charges_more(case_study, capsys):
    v, u = case_study[V2G].report, case_study[UC].report
    ok = u.total_charged_kwh > v.total_charged_kwh
    line(capsys, "7b", ok, f"total charged UC {u.total_charged_kwh:.2f} kWh vs "
         f"V2G {v.total_charged_kwh:.2f} kWh (V2G net of discharge "
         f"{v.total_charged_kwh + v.total_discharged_kwh:.2f})")
    assert ok


def test_c7c_discharge_signs(case_study, capsys):
    v, u = case_study[V2G].report, case_study[UC].report
    ok = v.total_discharged_kwh < 0 and u.total_discharged_kwh == 0
    line(capsys, "7c", ok, f"total discharged V2G {v.total_discharged_kwh:.3f} kWh, "
         f"UC {u.total_discharged_kwh}")
    assert ok


def test_c7d_discharge_price_bound(case_study, capsys):
    v = case_study[V2G].report
    peak = 1.12
    ok = abs(v.avg_discharge_price) <= 3 * peak + 1e-9
    line(capsys, "7d", ok, f"|avg discharge price| {abs(v.avg_discharge_price):.4f} <= {3 * peak:.2f}")
    assert ok


def test_c7e_bootstrap_reduction(case_study, capsys):
    big = case_study["big"]
    pct = charge_price_reduction_pct(big[V2G].report.avg_charge_price,
                                     big[UC].report.avg_charge_price)
    ok = 10 <= pct <= 45 and big[V2G].report.n_evs == 2000
    line(capsys, "7e", ok, f"2000-EV charge-cost reduction {pct:.2f}% (bracket 10-45%)")
    assert ok


def test_c7f_runtime(case_study, capsys):
    ok = case_study["elapsed"] <= 120
    line(capsys, "7f", ok, f"case-study runtime {case_study['elapsed']:.1f}s (limit 120s)")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_c8_deterministic_replay(tmp_path, capsys):
    for run in ("a", "b"):
        assert main(["trade", "--out", str(tmp_path / run), "--scheme", "both"]) in (0, 2)
        assert main(["consensus-bench", "--out", str(tmp_path / run / "bench"), "--nodes", "7",
                     "--faulty", "1", "--seeds", "2", "--duration", "20"]) == 0
    files = ["v2g/day_report.json", "uc/day_report.json", "v2g/metrics.csv", "uc/metrics.csv",
             "bench/metrics.csv"]
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    ok = len(same) == len(files)
    line(capsys, 8, ok, f"{len(same)}/{len(files)} output files byte-identical across reruns")
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_c9a_delay_additivity(capsys):
    rng = random.Random(9)
    p = NetParams()
    bad = 0
    for _ in range(10_000):
        a = NetNode(0, (rng.uniform(0, 2000), rng.uniform(0, 2000)), rng.uniform(0.1, 10))
        b = NetNode(1, (rng.uniform(0, 2000), rng.uniform(0, 2000)), rng.uniform(0.1, 10))
        msg = MessageEnvelope("m", 0, 1, rng.uniform(0, 0.05), "PREPARE")
        parts = (propagation_ms(a, b, p) + transmission_ms(msg.size, a, b)
                 + p.processing_delay_ms + p.queuing_delay_ms)
        bad += message_delay(msg, a, b, p) != parts
    line(capsys, "9a", bad == 0, f"hop delay equals its four components exactly in 10000/10000 "
         f"draws" if bad == 0 else f"{bad} mismatches")
    assert bad == 0


def test_c9b_linearization_error(capsys):
    m = BatteryModel()
    bp = m.breakpoints()
    errs, full = [], []
    scale = m.one_cycle_cost(0.0)
    for lo, hi in zip(bp, bp[1:]):
        s = np.linspace(lo, hi, 2001)
        exact = m.one_cycle_cost(s)
        err = np.abs(m.linearized_cost(s) - exact)
        errs.append(float(err.max() / np.abs(exact).max()))
        full.append(float(err.max() / scale))
    worst = int(np.argmax(errs))
    ok = max(errs) <= 0.05
    line(capsys, "9b", ok, "per-segment max error / segment max cost "
         + ", ".join(f"{e:.4f}" for e in errs)
         + f"; worst segment {worst} (SoC {bp[worst]:.1f}-{bp[worst + 1]:.1f}); "
         f"relative to full-scale cost the worst is {max(full):.4f}")
    assert ok


def test_c9c_concavity(capsys):
    rng = np.random.default_rng(99)
    bad = 0
    for _ in range(1000):
        w, a = rng.uniform(0.1, 10), rng.uniform(1e-3, 2)
        p_c = rng.uniform(0.05, 3)
        p_d = -rng.uniform(0, 3) * p_c
        for xs in (np.linspace(0, 1, 501), np.linspace(-1, 0, 501)):
            if np.any(np.diff(utility(xs, w, a, p_c, p_d), 2) > 1e-12):
                bad += 1
    line(capsys, "9c", bad == 0, f"second differences <= 0 on 1000 random curves "
         f"(both branches); violations {bad}")
    assert bad == 0


def test_c9d_soc_bounds(case_study, capsys):
    probes = [case_study[V2G], case_study[UC], *case_study["big"].values()]
    lo = min(p.soc_min for p in probes)
    hi = max(p.soc_max for p in probes)
    ok = 0.0 <= lo and hi <= 1.0
    line(capsys, "9d", ok, f"SoC range over all trajectories [{lo:.6f}, {hi:.6f}]")
    assert ok


def test_c9e_money_conservation(case_study, capsys):
    probes = [case_study[V2G], case_study[UC], *case_study["big"].values()]
    worst = max(p.cash_gap() for p in probes)
    ok = worst <= 1e-6
    line(capsys, "9e", ok, f"max per-slot |sum wallet deltas - EVA cash flow| {worst:.3e} CNY")
    assert ok
