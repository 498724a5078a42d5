"""
Fast-path finality against three-phase PBFT
===========================================

Run both protocols on the same simulated network for a few node counts and
compare mean confirmation latency. Short runs keep this quick; the CLI's
``consensus-bench`` command does the full sweep.
"""

import dataclasses

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from isat.consensus.sim import BenchConfig, run_consensus
from isat.orchestrator import Scenario

sc = Scenario.load()
sizes = [7, 10, 13, 16]
lat = {"fastpath": [], "pbft": []}
for n in sizes:
    for proto in lat:
        cfg = dataclasses.replace(sc.consensus, protocol=proto)
        res = run_consensus(cfg, sc.net, BenchConfig(nodes=n, duration_s=30, seed=1))
        lat[proto].append(res.metrics.mean_latency)
        print(f"n={n:2d} {proto:8s} {res.metrics.mean_latency:8.1f} ms")

for proto, ys in lat.items():
    plt.plot(sizes, ys, marker="o", label=proto)
plt.xlabel("nodes")
plt.ylabel("mean latency (ms)")
plt.legend()
plt.savefig("consensus_latency.png", dpi=120)
