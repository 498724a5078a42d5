"""Command-line entry points: ``consensus-bench``, ``trade`` and ``report``."""
from __future__ import annotations

import argparse
import dataclasses
import csv
import json
import os
import sys
from pathlib import Path

from .consensus import BenchConfig, run_consensus
from .consensus.faults import CRASH, EQUIVOCATE
from .consensus.metrics import METRICS_COLUMNS, write_metrics_csv
from .consensus.protocol import FASTPATH, PBFT
from .orchestrator import (REPORT_SCHEMA, SCHEMES, Scenario, ScenarioError, TradeDay,
                           charge_price_reduction_pct)

GRIDS = {
    "scalability": {"bench_nodes": [12, 14, 16, 18, 20, 22, 24], "bench_faulty": [0]},
    "robustness": {"bench_nodes": [15], "bench_faulty": [0, 1, 2]},
}
SUMMARY_COLUMNS = ("total_charged_kwh", "total_discharged_kwh", "avg_charge_price",
                  "avg_discharge_price")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isat", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--scenario", help="scenario JSON (default: packaged 12-EV scenario)")
        sp.add_argument("--out", default="isat-out", help="output directory")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a scenario parameter (repeatable)")
        seeds = sp.add_mutually_exclusive_group()
        seeds.add_argument("--seeds", type=int, help="number of seeds, starting at the base seed")
        seeds.add_argument("--seed-list", type=_int_list, help="explicit comma-separated seeds")

    b = sub.add_parser("consensus-bench", help="fast-path PBFT vs PBFT sweeps")
    common(b)
    b.add_argument("--nodes", type=_int_list)
    b.add_argument("--faulty", type=_int_list)
    b.add_argument("--protocol", choices=(FASTPATH, PBFT, "both"), default="both")
    b.add_argument("--grid", choices=sorted(GRIDS), help="preset node/fault grid")
    b.add_argument("--duration", type=float, help="simulated seconds per run")
    b.add_argument("--fault-mode", choices=(CRASH, EQUIVOCATE))

    t = sub.add_parser("trade", help="96-slot trading day with on-chain settlement")
    common(t)
    t.add_argument("--scheme", choices=SCHEMES + ("both",))

    r = sub.add_parser("report", help="merge run outputs and compute comparisons")
    r.add_argument("results", help="directory written by trade and/or consensus-bench")
    r.add_argument("--format", choices=("json", "gnuplot", "both"), default="both")
    return p


def _base_seed(args) -> int | None:
    env = os.environ.get("ISAT_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ScenarioError(f"ISAT_SEED must be an integer, got {env!r}") from None


def _load(args, extra=()) -> Scenario:
    overrides = list(extra) + list(args.overrides)
    return Scenario.load(args.scenario, overrides, seed=_base_seed(args)
                         if not any(o.startswith("seed=") for o in overrides) else None)


def _seeds(args, sc: Scenario, default_count: int) -> list[int]:
    if args.seed_list:
        return args.seed_list
    n = args.seeds if args.seeds is not None else default_count
    return [sc.seed + k for k in range(n)]


def _echo_config(sc: Scenario, out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = sc.effective_config()
    if extra:
        cfg.update(extra)
    (out / "effective_config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")


def run_consensus_bench(sc: Scenario, nodes, faulty, seeds, protocols, out: Path,
                        log=sys.stderr) -> list[dict]:
    """Every (nodes, faulty, seed) cell under each protocol, one CSV row per run."""
    rows = []
    g = sc.bench
    for n in nodes:
        for f in faulty:
            flag = "infeasible" if 3 * f >= n else ""
            for seed in seeds:
                for proto in protocols:
                    cfg = dataclasses.replace(sc.consensus, protocol=proto)
                    bench = BenchConfig(nodes=n, faulty=f, fault_mode=g.bench_fault_mode,
                                        duration_s=g.bench_duration_s,
                                        tx_rate_per_node=g.bench_tx_rate, seed=seed)
                    res = run_consensus(cfg, sc.net, bench)
                    row = res.metrics.row(proto, n, f, seed)
                    if res.trace.conflicts:
                        flag = (flag + ";" if flag else "") + "conflict"
                    row["flag"] = flag
                    rows.append(row)
                    print(f"[bench] n={n} f={f} seed={seed} {proto}: "
                          f"latency={row['mean_latency_ms']} tps={row['throughput_tps']}",
                          file=log)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / "metrics.csv")
    return rows


def run_trade(sc: Scenario, schemes, out: Path) -> dict:
    """Run each scheme, write its bundle under ``out/<scheme>``, return summaries."""
    fleet = sc.fleet()
    summaries = {}
    ok = True
    for scheme in schemes:
        day = TradeDay(sc, scheme, fleet)
        report = day.run()
        day.write_outputs(report, out / scheme)
        summaries[scheme] = report.summary()
        ok &= report.ledger_matches_market and report.unfinalized_settlements == 0
    comp = _comparison(summaries)
    if comp:
        (out / "comparison.json").write_text(json.dumps(comp, sort_keys=True, indent=2) + "\n")
    return {"summaries": summaries, "comparison": comp, "ok": ok}


def _comparison(summaries: dict) -> dict:
    if "v2g" in summaries and "uc" in summaries:
        return {"avg_charge_price_reduction_pct": charge_price_reduction_pct(
            summaries["v2g"]["avg_charge_price"], summaries["uc"]["avg_charge_price"])}
    return {}


def format_table(summaries: dict) -> str:
    head = f"{'scheme':<8}" + "".join(f"{c:>24}" for c in SUMMARY_COLUMNS)
    lines = [head]
    for scheme, s in summaries.items():
        lines.append(f"{scheme:<8}" + "".join(f"{s[c]:>24.4f}" for c in SUMMARY_COLUMNS))
    return "\n".join(lines)


def write_report(results: Path, fmt: str = "both") -> dict:
    """Merge a results directory into ``report.json`` plus gnuplot ``.dat`` files."""
    results = Path(results)
    if not results.is_dir():
        raise ScenarioError(f"results directory not found: {results}")
    days = {}
    for path in sorted(results.glob("*/day_report.json")):
        with open(path) as fh:
            days[path.parent.name] = json.load(fh)
    bench_rows = []
    bench_path = results / "metrics.csv"
    if bench_path.exists():
        with open(bench_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if [c for c in METRICS_COLUMNS if c not in (reader.fieldnames or [])]:
                raise ScenarioError(f"{bench_path}: unexpected metrics schema")
            bench_rows = list(reader)
    if not days and not bench_rows:
        raise ScenarioError(f"no run outputs found in {results}")
    versions = {d.get("schema_version") for d in days.values()}
    if len(versions) > 1 or (versions and versions != {REPORT_SCHEMA}):
        raise ScenarioError(f"incompatible day report schema versions: {sorted(map(str, versions))}")
    summaries = {k: {c: d[c] for c in SUMMARY_COLUMNS} for k, d in days.items()}
    report = {"schemes": summaries, **_comparison(summaries)}
    if bench_rows:
        report["bench_runs"] = len(bench_rows)
    if fmt in ("json", "both"):
        (results / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    if fmt in ("gnuplot", "both"):
        if bench_rows:
            _bench_dat(bench_rows, results)
        for scheme, d in days.items():
            _slots_dat(d["slots"], results / f"slots_{scheme}.dat")
    return report


def _bench_dat(rows: list[dict], results: Path) -> None:
    cells: dict[tuple, list] = {}
    for r in rows:
        cells.setdefault((r["protocol"], int(r["nodes"]), int(r["faulty"])), []).append(r)
    with open(results / "bench_means.dat", "w") as fh:
        fh.write("# protocol nodes faulty mean_latency_ms throughput_tps msgs_per_node_per_s runs\n")
        for (proto, n, f), rs in sorted(cells.items()):
            lats = [float(r["mean_latency_ms"]) for r in rs if r["mean_latency_ms"]]
            lat = sum(lats) / len(lats) if lats else float("nan")
            tps = sum(float(r["throughput_tps"]) for r in rs) / len(rs)
            mps = sum(float(r["msgs_per_node_per_s"]) for r in rs) / len(rs)
            fh.write(f"{proto} {n} {f} {lat:.6f} {tps:.6f} {mps:.6f} {len(rs)}\n")


def _slots_dat(slots: list[dict], path: Path) -> None:
    cols = list(slots[0].keys()) if slots else []
    with open(path, "w") as fh:
        fh.write("# " + " ".join(cols) + "\n")
        for s in slots:
            fh.write(" ".join(repr(s[c]) if isinstance(s[c], float) else str(s[c])
                              for c in cols) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            report = write_report(Path(args.results), args.format)
            print(json.dumps(report, sort_keys=True, indent=2))
            return 0
        out = Path(args.out)
        if args.verb == "consensus-bench":
            extra = []
            if args.grid:
                extra += [f"{k}={json.dumps(v)}" for k, v in GRIDS[args.grid].items()]
            if args.nodes:
                extra.append(f"bench_nodes={json.dumps(args.nodes)}")
            if args.faulty:
                extra.append(f"bench_faulty={json.dumps(args.faulty)}")
            if args.duration:
                extra.append(f"bench_duration_s={args.duration}")
            if args.fault_mode:
                extra.append(f"bench_fault_mode={args.fault_mode}")
            sc = _load(args, extra)
            seeds = _seeds(args, sc, sc.bench.bench_seeds)
            protocols = [FASTPATH, PBFT] if args.protocol == "both" else [args.protocol]
            _echo_config(sc, out, {"bench_seed_list": seeds, "protocols": protocols})
            rows = run_consensus_bench(sc, sc.bench.bench_nodes, sc.bench.bench_faulty, seeds,
                                       protocols, out)
            bad = [r for r in rows if "conflict" in r["flag"]]
            print(f"wrote {len(rows)} rows to {out / 'metrics.csv'}")
            return 0 if not bad else 2
        sc = _load(args, [f"scheme={args.scheme}"] if args.scheme else [])
        seeds = _seeds(args, sc, 1)
        ok = True
        for seed in seeds:
            run_sc = sc if seed == sc.seed else _load(args, (
                [f"scheme={args.scheme}"] if args.scheme else []) + [f"seed={seed}"])
            target = out if len(seeds) == 1 else out / f"seed{seed}"
            _echo_config(run_sc, target)
            res = run_trade(run_sc, run_sc.schemes(), target)
            print(f"seed {seed}")
            print(format_table(res["summaries"]))
            for k, v in res["comparison"].items():
                print(f"{k}: {v:.2f}")
            ok &= res["ok"]
        return 0 if ok else 2
    except (ScenarioError, OSError) as e:
        print(f"isat: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
