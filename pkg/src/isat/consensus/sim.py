"""Event-driven harness that runs a set of consensus nodes over the network model."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..ledger import Transaction
from ..simcore import (DELIVER, TIMER, Engine, SimulationError, NetParams, Network, derive_seeds,
                       pick_forward_targets, poisson_tx_arrivals)
from .faults import CRASH, EQUIVOCATE, FaultSchedule, inject_faults
from .metrics import ConsensusMetrics, RunTrace, compute_metrics
from .protocol import (CONSENSUS_KINDS, GOSSIP, ConsensusConfig, NodeState, StepResult,
                       consensus_step, make_nodes, on_timeout, start_height)

TICK = "tick"


class Hop:
    """Engine payload for one message hop."""
    __slots__ = ("msg", "frm")

    def __init__(self, msg, frm: int):
        self.msg = msg
        self.frm = frm

    @property
    def msg_id(self) -> str:
        return self.msg.msg_id or f"{self.msg.kind}|{self.msg.sender}|{self.msg.height}|{self.msg.round}"

    @property
    def kind(self) -> str:
        return self.msg.kind


@dataclass
class BenchConfig:
    nodes: int = 15
    faulty: int = 0
    fault_mode: str = CRASH
    duration_s: float = 600.0
    tx_rate_per_node: float = 1.0
    seed: int = 0
    gossip_realizations: int = 16
    record_trace: bool = False


@dataclass
class RunResult:
    metrics: ConsensusMetrics
    trace: RunTrace
    nodes: list[NodeState]
    faults: FaultSchedule
    engine: Engine = field(repr=False, default=None)


def _first_receipt(origin: int, delays, neighbors, fanout: int, rng: random.Random) -> list[float]:
    """One epidemic spread from ``origin``; returns first-receipt offset per node."""
    import heapq
    n = len(delays)
    first = [float("inf")] * n
    first[origin] = 0.0
    heap = [(delays[origin][nb], origin, nb)
            for nb in pick_forward_targets(neighbors[origin], fanout, rng, None)]
    heapq.heapify(heap)
    while heap:
        t, snd, rcv = heapq.heappop(heap)
        if first[rcv] <= t:
            continue
        first[rcv] = t
        for nb in pick_forward_targets(neighbors[rcv], fanout, rng, snd):
            heapq.heappush(heap, (t + delays[rcv][nb], rcv, nb))
    return first


class ConsensusSim:
    """Wires nodes, network, faults and workload onto one :class:`Engine`."""

    def __init__(self, cfg: ConsensusConfig, net: NetParams, bench: BenchConfig,
                 network: Network | None = None, txs: Sequence[Transaction] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.net = net
        self.bench = bench
        s_topo, s_tx, s_gossip, s_fault, s_node = derive_seeds(bench.seed, 5)
        self.network = network or Network.build(bench.nodes, net, random.Random(s_topo))
        n = self.network.size
        self.n = n
        self.duration_ms = bench.duration_s * 1000.0
        # the batch closed at t = duration still gets to finalize during the drain
        self.drain_ms = max(cfg.block_interval_ms, 10 * cfg.round_timeout_ms)
        self.faults = inject_faults(range(n), bench.faulty, self.duration_ms + self.drain_ms,
                                    random.Random(s_fault), mode=bench.fault_mode)
        byz = self.faults.faulty if bench.fault_mode == EQUIVOCATE else ()
        self.states = make_nodes(n, cfg, byzantine=byz, seed=s_node)
        self.engine = Engine(record_trace=bench.record_trace)
        self.engine.on(DELIVER, self._on_deliver)
        self.engine.on(TIMER, self._on_timer)
        self.D = self.network.delays(net.message_size)
        self.neighbors = [sorted(nd.neighbors) for nd in self.network.nodes]
        self.gossip_rng = random.Random(s_gossip)
        self.seen: list[set] = [set() for _ in range(n)]
        self.trace = RunTrace(nodes=n)
        self.first_digest: dict[int, str] = {}
        for st in self.states:
            st.pool_source = self._pool_for(st.id)
        self._setup_workload(random.Random(s_tx), txs)

    # -- workload ------------------------------------------------------------
    def _setup_workload(self, rng: random.Random, txs: Sequence[Transaction] | None) -> None:
        n = self.n
        if txs is None:
            arrivals = []
            for i in range(n):
                for k, t in enumerate(poisson_tx_arrivals(self.bench.tx_rate_per_node,
                                                          self.bench.duration_s, rng)):
                    arrivals.append((t, i, k))
            arrivals.sort()
            txs = [Transaction.synthetic(i, k, t, self.net.tx_size) for t, i, k in arrivals]
            origins = [i for _, i, _ in arrivals]
        else:
            txs = sorted(txs, key=lambda x: x.submitted_at)
            origins = [getattr(x.body, "origin", 0) if not isinstance(x.body, tuple) else x.body[0]
                       for x in txs]
        dtx = self.network.delays(self.net.tx_size)
        k = max(1, self.bench.gossip_realizations)
        self._grng = random.Random(rng.randrange(2**63))
        self._spreads = [[_first_receipt(o, dtx, self.neighbors, self.net.gossip_fanout, self._grng)
                          for _ in range(k)] for o in range(n)]
        self.pending: dict[str, tuple[Transaction, list[float]]] = {}
        self.tx_avail: list[tuple[Transaction, list[float]]] = []
        self._next_tx = 0
        self.submit(txs, origins)

    def submit(self, txs: Sequence[Transaction], origins: Sequence[int]) -> None:
        """Queue transactions for dissemination from their origin nodes.

        Submission times must not precede anything already queued.
        """
        k = len(self._spreads[0]) if self._spreads else 1
        last = self.tx_avail[-1][0].submitted_at if self.tx_avail else float("-inf")
        for tx, o in zip(txs, origins):
            if tx.submitted_at < last:
                raise SimulationError("transactions must be submitted in time order")
            last = tx.submitted_at
            t0 = self.faults.recovery_after(o, tx.submitted_at)
            spread = self._spreads[o][self._grng.randrange(k)]
            avail = [t0 + off for off in spread]
            if self.faults.intervals:
                avail = [self.faults.recovery_after(j, a) for j, a in enumerate(avail)]
            self.tx_avail.append((tx, avail))
            self.trace.submitted[tx.tx_id] = tx.submitted_at

    def _admit(self, now: float) -> None:
        while self._next_tx < len(self.tx_avail) and self.tx_avail[self._next_tx][0].submitted_at <= now:
            tx, avail = self.tx_avail[self._next_tx]
            self.pending[tx.tx_id] = (tx, avail)
            self._next_tx += 1

    def _pool_for(self, node: int) -> Callable[[float], list[Transaction]]:
        def pool(now: float) -> list[Transaction]:
            self._admit(now)
            cap = self.cfg.max_block_txs
            out = []
            chain = self.states[node].chain
            for tx, avail in self.pending.values():
                if avail[node] <= now and not chain.contains_tx(tx.tx_id):
                    out.append(tx)
                    if len(out) >= cap:
                        break
            return out
        return pool

    # -- plumbing ------------------------------------------------------------
    def _emit(self, node: int, res: StepResult) -> None:
        eng = self.engine
        at = res.at
        for targets, msg in res.out:
            if targets == GOSSIP:
                self.seen[node].add(msg.msg_id)
                self._gossip(node, msg, at, None)
                continue
            row = self.D[node]
            if at < eng.now:
                raise SimulationError("message sent before the current time")
            push = eng.schedule_after
            for r in targets:
                if r != node:
                    push(row[r], at, DELIVER, r, Hop(msg, node))
        for kind, fire_at, h, rnd in res.timers:
            eng.schedule(max(fire_at, eng.now), TIMER, node, (kind, h, rnd))
        for block in res.finalized:
            self._record_final(block, at)

    def _gossip(self, node: int, msg, at: float, came_from: int | None) -> None:
        row = self.D[node]
        cands = [x for x in self.neighbors[node] if x != came_from]
        k = self.net.gossip_fanout
        targets = cands if len(cands) <= k else self.gossip_rng.sample(cands, k)
        push = self.engine.schedule_after
        for nb in targets:
            push(row[nb], at, DELIVER, nb, Hop(msg, node))

    def _record_final(self, block, at: float) -> None:
        h = block.height
        d = self.first_digest.get(h)
        if d is None:
            self.first_digest[h] = block.digest
            self.trace.block_finalized[h] = at
            conf = self.trace.confirmed
            for tx in block.txs:
                if tx.tx_id not in conf:
                    conf[tx.tx_id] = at
                    self.pending.pop(tx.tx_id, None)
        elif d != block.digest:
            self.trace.conflicts += 1

    # -- handlers ------------------------------------------------------------
    def _on_deliver(self, eng: Engine, t: float, node: int, hop: Hop) -> None:
        if self.faults.intervals and self.faults.is_down(node, t):
            return
        msg = hop.msg
        self.trace.messages_received += 1
        gossip = msg.kind == "DECISION"
        if gossip:
            seen = self.seen[node]
            if msg.msg_id in seen:
                return
            seen.add(msg.msg_id)
        st = self.states[node]
        now = max(t, st.busy_until) + self.cfg.message_validation_ms
        st.busy_until = now
        res = consensus_step(st, msg, now)
        self._emit(node, res)
        if gossip:
            self._gossip(node, msg, res.at, hop.frm)

    def _on_timer(self, eng: Engine, t: float, node: int, payload) -> None:
        if payload[0] == TICK:
            self._on_tick(t, payload[1])
            return
        if self.faults.is_down(node, t):
            eng.schedule(self.faults.recovery_after(node, t), TIMER, node, payload)
            return
        kind, h, rnd = payload
        st = self.states[node]
        res = on_timeout(st, kind, max(t, st.busy_until), h, rnd)
        self._emit(node, res)

    def _on_tick(self, t: float, k: int) -> None:
        self._admit(t)
        for st in self.states:
            if self.faults.is_down(st.id, t):
                continue
            if not st.started:
                self.trace.block_started.setdefault(st.height, t)
            res = start_height(st, max(t, st.busy_until))
            self._emit(st.id, res)
        nxt = (k + 1) * self.cfg.block_interval_ms
        if nxt <= self.duration_ms:
            self.engine.schedule(nxt, TIMER, -1, (TICK, k + 1))

    def start(self) -> None:
        self.engine.schedule(self.cfg.block_interval_ms, TIMER, -1, (TICK, 1))

    def advance(self, t_end: float) -> None:
        """Process every event up to ``t_end`` (ms); may be called repeatedly."""
        self.engine.run_until(t_end)

    def finish(self) -> RunResult:
        self.engine.run_until(self.duration_ms + self.drain_ms)
        self.trace.round_changes = max((s.round_changes for s in self.states), default=0)
        m = compute_metrics(self.trace, self.bench.duration_s)
        return RunResult(m, self.trace, self.states, self.faults, self.engine)

    def run(self) -> RunResult:
        self.start()
        return self.finish()


def run_consensus(cfg: ConsensusConfig, net: NetParams, bench: BenchConfig, **kw) -> RunResult:
    return ConsensusSim(cfg, net, bench, **kw).run()
