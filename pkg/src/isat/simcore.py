"""Discrete-event engine and the charging-point network model.

Time is measured in milliseconds. Events are ordered by ``(fire_at, seq)``
where ``seq`` is a monotone insertion counter, so two runs with the same
configuration and seed process exactly the same event sequence.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import networkx as nx
import numpy as np

# event kinds
DELIVER = "deliver-message"
TIMER = "timer-expiry"
TX_ARRIVAL = "tx-arrival"
FAULT_ONSET = "fault-onset"
FAULT_RECOVERY = "fault-recovery"
SLOT_BOUNDARY = "slot-boundary"
EVENT_KINDS = (DELIVER, TIMER, TX_ARRIVAL, FAULT_ONSET, FAULT_RECOVERY, SLOT_BOUNDARY)

MSG_KINDS = ("PROPOSE", "PREPARE", "COMMIT", "DECISION", "ROUNDCHANGE", "SYNC",
             "TX", "ORACLE", "PRICE")

MIN_BANDWIDTH = 0.1  # MB/s


class ConfigurationError(ValueError):
    pass


class SimulationError(RuntimeError):
    """Raised when a handler breaks the engine's ordering guarantees."""


@dataclass
class SimClock:
    now: float = 0.0

    def advance(self, t: float) -> None:
        if t < self.now:
            raise SimulationError(f"clock moved backwards: {t} < {self.now}")
        self.now = t


@dataclass(frozen=True)
class SimEvent:
    fire_at: float
    seq: int
    kind: str
    node: int
    payload: object = None


@dataclass(frozen=True)
class TraceRecord:
    time_ms: float
    event_kind: str
    node_id: int
    msg_id: str
    msg_kind: str


@dataclass
class NetParams:
    propagation_speed: float = 2e8   # m/s
    bandwidth_mean: float = 5.0      # MB/s
    bandwidth_sd: float = 0.5
    processing_delay_ms: float = 0.01
    queuing_delay_ms: float = 0.01
    gossip_fanout: int = 4
    message_size: float = 0.002      # MB
    tx_size: float = 0.01            # MB
    degree: int = 8
    area_m: float = 2000.0
    # when set, every hop takes exactly this long (synthetic uniform network)
    fixed_delay_ms: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.bandwidth_mean <= 0:
            raise ConfigurationError("bandwidth_mean must be positive")
        if self.bandwidth_sd < 0:
            raise ConfigurationError("bandwidth_sd must be non-negative")
        if self.processing_delay_ms < 0 or self.queuing_delay_ms < 0:
            raise ConfigurationError("delays must be non-negative")
        if self.propagation_speed <= 0:
            raise ConfigurationError("propagation_speed must be positive")
        if not 1 <= self.gossip_fanout <= 8:
            raise ConfigurationError("gossip_fanout must lie in 1..8")
        if self.fixed_delay_ms is not None and self.fixed_delay_ms < 0:
            raise ConfigurationError("fixed_delay_ms must be non-negative")


@dataclass
class NetNode:
    id: int
    position: tuple[float, float]
    bandwidth: float
    neighbors: frozenset[int] = frozenset()
    plugged: bool = False
    up: bool = True


@dataclass(frozen=True)
class MessageEnvelope:
    msg_id: str
    sender: int
    receiver: int
    size: float
    kind: str
    body: object = None
    sent_at: float = 0.0


def propagation_ms(sender: NetNode, receiver: NetNode, p: NetParams) -> float:
    dist = math.dist(sender.position, receiver.position)
    return dist / p.propagation_speed * 1000.0


def transmission_ms(size_mb: float, sender: NetNode, receiver: NetNode) -> float:
    bw = min(sender.bandwidth, receiver.bandwidth)
    if bw <= 0:
        raise ConfigurationError(f"non-positive bandwidth between {sender.id} and {receiver.id}")
    return size_mb / bw * 1000.0


def message_delay(msg: MessageEnvelope, sender: NetNode, receiver: NetNode, p: NetParams) -> float:
    """Latency of one hop: propagation + transmission + processing + queuing (ms)."""
    if p.fixed_delay_ms is not None:
        return p.fixed_delay_ms
    return (propagation_ms(sender, receiver, p) + transmission_ms(msg.size, sender, receiver)
            + p.processing_delay_ms + p.queuing_delay_ms)


def sample_bandwidth(p: NetParams, rng: random.Random) -> float:
    if p.bandwidth_mean <= 0:
        raise ConfigurationError("bandwidth_mean must be positive")
    if p.bandwidth_sd == 0:
        return p.bandwidth_mean
    return max(MIN_BANDWIDTH, rng.gauss(p.bandwidth_mean, p.bandwidth_sd))


def poisson_tx_arrivals(rate_per_s: float, duration_s: float, rng: random.Random) -> list[float]:
    """Arrival timestamps (ms) of a homogeneous Poisson process on [0, duration)."""
    if rate_per_s < 0 or duration_s <= 0:
        raise ConfigurationError("rate must be >= 0 and duration > 0")
    if rate_per_s == 0:
        return []
    out = []
    t = rng.expovariate(rate_per_s)
    while t < duration_s:
        out.append(t * 1000.0)
        t += rng.expovariate(rate_per_s)
    return out


def build_topology(n: int, degree: int, seed: int, attempts: int = 10) -> nx.Graph:
    """Seeded random regular graph; falls back to a complete graph for small n."""
    if n < 1:
        raise ConfigurationError("need at least one node")
    d = min(degree, n - 1)
    if (n * d) % 2:
        d -= 1
    if d >= n - 1:
        return nx.complete_graph(n)
    for k in range(attempts):
        g = nx.random_regular_graph(d, n, seed=seed + k)
        if nx.is_connected(g):
            return g
    raise ConfigurationError(f"no connected {d}-regular graph on {n} nodes after {attempts} tries")


class Network:
    """Node placement, bandwidths, neighbor sets and cached hop delays."""

    def __init__(self, nodes: Sequence[NetNode], params: NetParams):
        self.nodes = list(nodes)
        self.params = params
        self._delay_cache: dict[float, list[list[float]]] = {}

    @classmethod
    def build(cls, n: int, params: NetParams, rng: random.Random | None = None) -> "Network":
        params.validate()
        rng = rng or random.Random(params.seed)
        g = build_topology(n, params.degree, rng.randrange(2**31))
        nodes = []
        for i in range(n):
            pos = (rng.uniform(0, params.area_m), rng.uniform(0, params.area_m))
            bw = sample_bandwidth(params, rng)
            nodes.append(NetNode(i, pos, bw, frozenset(g.neighbors(i))))
        return cls(nodes, params)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def delays(self, size_mb: float) -> list[list[float]]:
        """n x n matrix of hop delays for messages of ``size_mb``."""
        table = self._delay_cache.get(size_mb)
        if table is None:
            probe = MessageEnvelope("probe", 0, 0, size_mb, "PREPARE")
            table = [[0.0 if a.id == b.id else message_delay(probe, a, b, self.params)
                      for b in self.nodes] for a in self.nodes]
            self._delay_cache[size_mb] = table
        return table

    def is_connected(self) -> bool:
        g = nx.Graph()
        g.add_nodes_from(range(self.size))
        for node in self.nodes:
            g.add_edges_from((node.id, nb) for nb in node.neighbors)
        return nx.is_connected(g)


def pick_forward_targets(neighbors: Iterable[int], fanout: int, rng: random.Random,
                         exclude: int | None = None) -> list[int]:
    cands = sorted(nb for nb in neighbors if nb != exclude)
    if len(cands) <= fanout:
        return cands
    return rng.sample(cands, fanout)


@dataclass(frozen=True)
class Delivery:
    time: float
    sender: int
    receiver: int
    accepted: bool
    reason: str = ""  # "", "duplicate" or "down"


@dataclass
class GossipSchedule:
    msg_id: str
    origin: int
    deliveries: list[Delivery] = field(default_factory=list)
    first_receipt: dict[int, float] = field(default_factory=dict)

    @property
    def holders(self) -> set[int]:
        return set(self.first_receipt)

    @property
    def forwarded(self) -> int:
        return len(self.deliveries)


def gossip_disseminate(origin: int, msg: MessageEnvelope, network: Network, fanout: int,
                       rng: random.Random, start: float = 0.0,
                       is_up: Callable[[int, float], bool] | None = None) -> GossipSchedule:
    """Compute the full epidemic spread of ``msg`` from ``origin``.

    A node forwards on first receipt to ``fanout`` random neighbors other than
    the one it heard from; duplicates and deliveries to down nodes are dropped.
    """
    if fanout < 1:
        raise ConfigurationError("fanout must be >= 1")
    sched = GossipSchedule(msg.msg_id, origin)
    if is_up is not None and not is_up(origin, start):
        return sched
    sched.first_receipt[origin] = start
    delays = network.delays(msg.size)
    heap: list[tuple[float, int, int, int]] = []
    seq = itertools.count()

    def forward(node: int, t: float, came_from: int | None) -> None:
        for nb in pick_forward_targets(network.nodes[node].neighbors, fanout, rng, came_from):
            heapq.heappush(heap, (t + delays[node][nb], next(seq), node, nb))

    forward(origin, start, None)
    while heap:
        t, _, snd, rcv = heapq.heappop(heap)
        if is_up is not None and not is_up(rcv, t):
            sched.deliveries.append(Delivery(t, snd, rcv, False, "down"))
            continue
        if rcv in sched.first_receipt:
            sched.deliveries.append(Delivery(t, snd, rcv, False, "duplicate"))
            continue
        sched.deliveries.append(Delivery(t, snd, rcv, True))
        sched.first_receipt[rcv] = t
        forward(rcv, t, snd)
    return sched


Handler = Callable[["Engine", float, int, object], None]


class Engine:
    """Sequential event loop with a (fire_at, seq) total order."""

    def __init__(self, record_trace: bool = False):
        self.clock = SimClock()
        self._queue: list[tuple[float, int, str, int, object]] = []
        self._seq = itertools.count()
        self._handlers: dict[str, Handler] = {}
        self.record_trace = record_trace
        self.trace: list[TraceRecord] = []
        self.processed = 0

    @property
    def now(self) -> float:
        return self.clock.now

    def on(self, kind: str, handler: Handler) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        self._handlers[kind] = handler

    def schedule(self, fire_at: float, kind: str, node: int = -1, payload: object = None) -> None:
        if fire_at < self.clock.now:
            raise SimulationError(f"event scheduled in the past: {fire_at} < {self.clock.now}")
        heapq.heappush(self._queue, (fire_at, next(self._seq), kind, node, payload))

    def schedule_after(self, delay: float, at: float, kind: str, node: int, payload: object) -> None:
        """Schedule at ``at + delay`` where ``at >= now`` and ``delay >= 0`` (hot path)."""
        heapq.heappush(self._queue, (at + delay, next(self._seq), kind, node, payload))

    def pending(self) -> int:
        return len(self._queue)

    def peek(self) -> SimEvent | None:
        if not self._queue:
            return None
        return SimEvent(*self._queue[0])

    def run_until(self, t_end: float) -> list[TraceRecord]:
        """Process every event with ``fire_at <= t_end``; return the trace."""
        q = self._queue
        handlers = self._handlers
        clock = self.clock
        pop = heapq.heappop
        while q and q[0][0] <= t_end:
            fire_at, _, kind, node, payload = pop(q)
            clock.now = fire_at
            self.processed += 1
            if self.record_trace:
                self._record(fire_at, kind, node, payload)
            handlers[kind](self, fire_at, node, payload)
        return self.trace

    def _record(self, t: float, kind: str, node: int, payload: object) -> None:
        msg_id = getattr(payload, "msg_id", "")
        msg_kind = getattr(payload, "kind", "")
        self.trace.append(TraceRecord(t, kind, node, msg_id, msg_kind))


def write_trace_csv(trace: Iterable[TraceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", "event_kind", "node_id", "msg_id", "msg_kind"])
        for r in trace:
            w.writerow([repr(r.time_ms), r.event_kind, r.node_id, r.msg_id, r.msg_kind])


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds so each random stream stays put when others change."""
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(count)]
