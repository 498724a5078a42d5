"""Crash/recover and equivocation fault schedules."""
from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field
from typing import Sequence

CRASH = "crash"
EQUIVOCATE = "equivocate"


@dataclass
class FaultSchedule:
    """Per-node down intervals ``[onset, recovery)`` in ms.

    For crash mode a node is down inside its intervals. For equivocate mode the
    listed nodes are byzantine for the whole run and the intervals are unused.
    """
    intervals: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    mode: str = CRASH

    def __post_init__(self):
        self._starts = {k: [a for a, _ in v] for k, v in self.intervals.items()}

    @property
    def faulty(self) -> list[int]:
        return sorted(self.intervals)

    def is_down(self, node: int, t: float) -> bool:
        if self.mode != CRASH:
            return False
        starts = self._starts.get(node)
        if not starts:
            return False
        i = bisect.bisect_right(starts, t) - 1
        return i >= 0 and t < self.intervals[node][i][1]

    def recovery_after(self, node: int, t: float) -> float:
        """End of the down interval covering ``t`` (``t`` itself if up)."""
        starts = self._starts.get(node)
        if self.mode != CRASH or not starts:
            return t
        i = bisect.bisect_right(starts, t) - 1
        if i >= 0 and t < self.intervals[node][i][1]:
            return self.intervals[node][i][1]
        return t

    def is_byzantine(self, node: int) -> bool:
        return self.mode == EQUIVOCATE and node in self.intervals

    def problems(self) -> list[str]:
        out = []
        for node, ivs in self.intervals.items():
            last = float("-inf")
            for a, b in ivs:
                if not a < b:
                    out.append(f"node {node}: onset {a} not before recovery {b}")
                if a < last:
                    out.append(f"node {node}: interval starting {a} overlaps previous")
                last = b
        return out


def inject_faults(nodes: Sequence[int], count_faulty: int, duration_ms: float,
                  rng: random.Random, up_range=(30.0, 60.0), down_range=(3.0, 6.0),
                  mode: str = CRASH) -> FaultSchedule:
    """Pick ``count_faulty`` nodes that alternate up U(30,60) ms, down U(3,6) ms."""
    if count_faulty <= 0:
        return FaultSchedule({}, mode)
    if count_faulty > len(nodes):
        raise ValueError("more faulty nodes than nodes")
    chosen = sorted(rng.sample(sorted(nodes), count_faulty))
    intervals: dict[int, list[tuple[float, float]]] = {}
    for node in chosen:
        ivs = []
        t = rng.uniform(*up_range)
        while t < duration_ms:
            down = rng.uniform(*down_range)
            ivs.append((t, t + down))
            t += down + rng.uniform(*up_range)
        intervals[node] = ivs if mode == CRASH else [(0.0, duration_ms)]
    return FaultSchedule(intervals, mode)
