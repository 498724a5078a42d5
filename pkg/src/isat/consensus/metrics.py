"""Latency, throughput and message-load metrics for consensus runs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

METRICS_COLUMNS = ("protocol", "nodes", "faulty", "seed", "mean_latency_ms", "throughput_tps",
                   "msgs_per_node_per_s", "finalized_blocks", "round_changes")


@dataclass
class RunTrace:
    """Compact record of one run, enough to derive every metric."""
    nodes: int
    submitted: dict[str, float] = field(default_factory=dict)   # tx_id -> submit ms
    confirmed: dict[str, float] = field(default_factory=dict)   # tx_id -> first finality ms
    messages_received: int = 0
    block_started: dict[int, float] = field(default_factory=dict)
    block_finalized: dict[int, float] = field(default_factory=dict)
    round_changes: int = 0
    conflicts: int = 0


@dataclass
class ConsensusMetrics:
    mean_latency: float | None
    throughput: float
    msgs_per_node_per_s: float
    finalized_blocks: int
    round_changes: int

    def row(self, protocol: str, nodes: int, faulty: int, seed: int) -> dict:
        lat = "" if self.mean_latency is None else repr(self.mean_latency)
        return {"protocol": protocol, "nodes": nodes, "faulty": faulty, "seed": seed,
                "mean_latency_ms": lat, "throughput_tps": repr(self.throughput),
                "msgs_per_node_per_s": repr(self.msgs_per_node_per_s),
                "finalized_blocks": self.finalized_blocks, "round_changes": self.round_changes}


def compute_metrics(trace: RunTrace, duration_s: float) -> ConsensusMetrics:
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    lats = [t - trace.submitted[tx] for tx, t in trace.confirmed.items() if tx in trace.submitted]
    mean = sum(lats) / len(lats) if lats else None
    n = max(trace.nodes, 1)
    return ConsensusMetrics(
        mean_latency=mean,
        throughput=len(lats) / duration_s,
        msgs_per_node_per_s=trace.messages_received / (n * duration_s),
        finalized_blocks=len(trace.block_finalized),
        round_changes=trace.round_changes,
    )


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(METRICS_COLUMNS) + ["flag"], extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({"flag": "", **r})
