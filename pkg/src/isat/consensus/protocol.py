"""Fast-path PBFT and classical PBFT as per-node state machines.

Each node is a :class:`NodeState`. The driver feeds it messages through
:func:`consensus_step` (or :func:`pbft_baseline_step`) and timer expiries
through :func:`on_timeout`; both return a :class:`StepResult` holding the
messages to send, timers to arm and any block finalized by the call.

For speed the state object is updated in place and also returned. Tests that
need the old state can ``copy.deepcopy`` it first.
"""
from __future__ import annotations

import enum
import functools
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..ledger import (Block, BlockRejected, Certificate, Chain, Transaction, Vote,
                      append_block, digest, merkle_ok, quorum_threshold, sign,
                      verify_signature)

FASTPATH = "fastpath"
PBFT = "pbft"
PROTOCOLS = (FASTPATH, PBFT)

GOSSIP = "gossip"
FAST_TIMER = "fast-path"
ROUND_TIMER = "round"

CONSENSUS_KINDS = ("PROPOSE", "PREPARE", "COMMIT", "DECISION", "ROUNDCHANGE", "SYNC")


class ConsensusError(RuntimeError):
    pass


class Phase(enum.Enum):
    IDLE = "IDLE"
    PROPOSED = "PROPOSED"
    PREPARED = "PREPARED"      # finalized on the fast path
    COMMITTING = "COMMITTING"
    DECIDED = "DECIDED"        # finalized on the commit path


@dataclass
class ValidatorPolicy:
    alpha_percent: float = 100.0

    def target(self, n_all: int) -> int:
        if not 0 < self.alpha_percent <= 100:
            raise ValueError("alpha_percent must be in (0, 100]")
        t = math.ceil(self.alpha_percent / 100.0 * n_all - 1e-9)
        return max(t, min(4, n_all))


@dataclass
class ConsensusConfig:
    protocol: str = FASTPATH
    fast_path_timeout_ms: float = 10.0
    round_timeout_ms: float = 20.0
    block_creation_ms: float = 0.1
    block_validation_ms: float = 0.5
    message_validation_ms: float = 0.1
    max_block_txs: int = 200
    alpha_percent: float = 100.0
    block_interval_ms: float = 1000.0

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        for name in ("fast_path_timeout_ms", "round_timeout_ms", "block_creation_ms",
                     "block_validation_ms", "message_validation_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_block_txs < 0:
            raise ValueError("max_block_txs must be >= 0")
        if self.block_interval_ms <= 0:
            raise ValueError("block_interval_ms must be > 0")
        ValidatorPolicy(self.alpha_percent).target(4)


@dataclass(frozen=True)
class ConsensusMsg:
    """One consensus message. Unused fields stay at their defaults."""
    kind: str
    sender: int
    height: int
    round: int
    digest: str = ""
    block: Block | None = None
    vote: Vote | None = None
    cert: Certificate | None = None
    justification: tuple = ()        # ROUNDCHANGE messages backing a re-proposal
    report: tuple | None = None      # (vote_round, block, proposal_sig) in ROUNDCHANGE
    blocks: tuple = ()               # SYNC response payload
    sig: str = ""
    msg_id: str = ""


@dataclass
class RoundState:
    round: int = 0
    leader: int = -1
    validators: frozenset = frozenset()
    phase: Phase = Phase.IDLE
    proposed_block: Block | None = None
    proposal_sig: str = ""
    prepare_votes: dict = field(default_factory=dict)   # digest -> {signer: Vote}
    commit_votes: dict = field(default_factory=dict)
    fast_path_deadline: float = math.inf
    round_deadline: float = math.inf
    commit_sent: bool = False
    proposed: bool = False
    quorum: int = 1


@dataclass(slots=True)
class StepResult:
    out: list = field(default_factory=list)          # (targets | GOSSIP, ConsensusMsg)
    at: float = 0.0
    finalized: list = field(default_factory=list)    # blocks appended by this call
    timers: list = field(default_factory=list)       # (kind, fire_at, height, round)


@dataclass
class NodeState:
    id: int
    nodes: tuple
    plugged: tuple
    cfg: ConsensusConfig = field(default_factory=ConsensusConfig)
    chain: Chain = field(default_factory=Chain)
    byzantine: bool = False
    rs: RoundState = field(default_factory=RoundState)
    started: bool = False
    voted: tuple | None = None                         # (round, block, proposal_sig)
    rc_msgs: dict = field(default_factory=dict)        # round -> {sender: msg}
    future: list = field(default_factory=list)
    proposals_seen: dict = field(default_factory=dict)  # (round) -> digest
    busy_until: float = 0.0
    sync_asked: dict = field(default_factory=dict)      # height -> time
    dropped: int = 0
    round_changes: int = 0
    evidence: list = field(default_factory=list)
    rng: random.Random = field(default_factory=random.Random)
    pool_source: object = None                          # callable(cutoff) -> txs for fresh blocks
    height_started: float = 0.0                         # batch cut-off for this height

    @property
    def height(self) -> int:
        """Height currently being decided."""
        return self.chain.height + 1

    @property
    def is_validator(self) -> bool:
        return self.id in self.rs.validators


def make_nodes(n: int, cfg: ConsensusConfig | None = None, plugged: Iterable[int] | None = None,
               byzantine: Iterable[int] = (), seed: int = 0) -> list[NodeState]:
    cfg = cfg or ConsensusConfig()
    ids = tuple(range(n))
    plug = tuple(sorted(plugged)) if plugged is not None else ids
    byz = set(byzantine)
    return [NodeState(i, ids, plug, cfg, Chain(), i in byz, rng=random.Random(seed * 7919 + i))
            for i in ids]


# -- election and validator choice ------------------------------------------

def elect_leader(prev_block_digest, plugged: Iterable[int]) -> int:
    """``plugged[digest mod |plugged|]`` over ids sorted ascending."""
    ordered = sorted(plugged)
    if not ordered:
        raise ConsensusError("no plugged node to elect")
    value = int(prev_block_digest, 16) if isinstance(prev_block_digest, str) else int(prev_block_digest)
    return ordered[value % len(ordered)]


def round_digest(prev_digest: str, rnd: int) -> str:
    return prev_digest if rnd == 0 else digest(f"{prev_digest}|{rnd}".encode())


def select_validators(leader: int, plugged: Iterable[int], all_up: Iterable[int],
                      policy: ValidatorPolicy, rng: random.Random) -> frozenset:
    everyone = sorted(all_up)
    target = policy.target(len(everyone))
    if target > len(everyone):
        raise ValueError(f"validator target {target} exceeds {len(everyone)} nodes")
    plug = sorted(set(plugged) & set(everyone))
    if target >= len(everyone):
        return frozenset(everyone)
    if len(plug) >= target:
        others = [p for p in plug if p != leader]
        return frozenset([leader] + rng.sample(others, target - 1))
    chosen = set(plug) | {leader}
    rest = [x for x in everyone if x not in chosen]
    return frozenset(chosen | set(rng.sample(rest, target - len(chosen))))


@functools.lru_cache(maxsize=65536)
def round_setup(prev_digest: str, rnd: int, plugged: tuple, nodes: tuple,
                alpha_percent: float) -> tuple[int, frozenset]:
    """(leader, validators) for a round; identical on every honest node."""
    d = round_digest(prev_digest, rnd)
    pool = plugged or nodes
    leader = elect_leader(d, pool)
    rng = random.Random(int(d[:16], 16))
    return leader, select_validators(leader, pool, nodes, ValidatorPolicy(alpha_percent), rng)


@functools.lru_cache(maxsize=1 << 18)
def _sig_ok(signer: int, payload: str, sig: str) -> bool:
    return verify_signature(signer, payload, sig)


def vote_ok(v: Vote) -> bool:
    return v.valid


def proposal_payload(height: int, rnd: int, block_digest: str) -> str:
    return f"PROPOSE|{height}|{rnd}|{block_digest}"


def rc_payload(height: int, rnd: int, report: tuple | None) -> str:
    if report is None:
        return f"RC|{height}|{rnd}|-"
    return f"RC|{height}|{rnd}|{report[0]}|{report[1].digest}"


# -- round lifecycle ---------------------------------------------------------

def _setup(state: NodeState, rnd: int) -> tuple[int, frozenset]:
    return round_setup(state.chain.tip.digest, rnd, state.plugged, state.nodes,
                       state.cfg.alpha_percent)


def _enter_round(state: NodeState, rnd: int, now: float, res: StepResult) -> None:
    leader, vals = _setup(state, rnd)
    if not state.started:
        state.height_started = now
    state.rs = RoundState(rnd, leader, vals, quorum=quorum_threshold(len(vals)))
    state.started = True
    if state.cfg.protocol == FASTPATH:
        state.rs.fast_path_deadline = now + state.cfg.fast_path_timeout_ms
        res.timers.append((FAST_TIMER, state.rs.fast_path_deadline, state.height, rnd))
    state.rs.round_deadline = now + state.cfg.round_timeout_ms
    res.timers.append((ROUND_TIMER, state.rs.round_deadline, state.height, rnd))


def start_height(state: NodeState, now: float,
                 tx_pool: Sequence[Transaction] | None = None) -> StepResult:
    """Begin round 0 of the current height (block tick). Leaders propose."""
    res = StepResult(at=now)
    if state.started:
        return res
    _enter_round(state, 0, now, res)
    if state.rs.leader == state.id:
        if tx_pool is None:
            tx_pool = state.pool_source(now) if state.pool_source else ()
        _merge(res, propose(state, tx_pool, now))
    _drain_future(state, now, res)
    return res


def _merge(res: StepResult, other: StepResult) -> None:
    res.out.extend(other.out)
    res.finalized.extend(other.finalized)
    res.timers.extend(other.timers)
    res.at = max(res.at, other.at)


def propose(state: NodeState, tx_pool: Sequence[Transaction], now: float,
            justification: tuple = (), reuse: Block | None = None) -> StepResult:
    """Leader assembles a FIFO batch and multicasts PROPOSE to C(l)."""
    rs = state.rs
    res = StepResult(at=now)
    if rs.leader != state.id or rs.proposed:
        return res
    t = now + state.cfg.block_creation_ms
    if reuse is not None:
        block = reuse
    else:
        txs = []
        seen = set()
        for tx in tx_pool:
            if len(txs) >= state.cfg.max_block_txs:
                break
            if tx.tx_id in seen or state.chain.contains_tx(tx.tx_id):
                continue
            seen.add(tx.tx_id)
            txs.append(tx)
        block = Block.assemble(state.height, state.chain.tip.digest, rs.round, t, state.id, txs)
    d = block.digest
    sig = sign(state.id, proposal_payload(state.height, rs.round, d))
    vote = Vote.make("PREPARE", state.height, rs.round, d, state.id)
    msg = ConsensusMsg("PROPOSE", state.id, state.height, rs.round, d, block=block, vote=vote,
                       justification=justification, sig=sig)
    rs.proposed = True
    rs.proposed_block = block
    rs.proposal_sig = sig
    rs.phase = Phase.PROPOSED
    state.voted = (rs.round, block, sig)
    state.proposals_seen[rs.round] = d
    rs.prepare_votes.setdefault(d, {})[state.id] = vote
    state.busy_until = max(state.busy_until, t)
    res.at = t
    res.out.append((_peers(state, rs.validators), msg))
    # quorum can already hold when |C(l)| is tiny
    _check_prepare_quorum(state, t, res)
    return res


def _peers(state: NodeState, group: Iterable[int]) -> tuple:
    return tuple(x for x in sorted(group) if x != state.id)


# -- message handling --------------------------------------------------------

def consensus_step(state: NodeState, msg: ConsensusMsg, now: float) -> StepResult:
    """Handle one incoming message under the node's configured protocol."""
    res = StepResult(at=now)
    _dispatch(state, msg, now, res)
    return res


def pbft_baseline_step(state: NodeState, msg: ConsensusMsg, now: float) -> StepResult:
    """Classical three-phase PBFT: commit quorum is always required."""
    if state.cfg.protocol != PBFT:
        raise ConsensusError("node is not configured for the PBFT baseline")
    return consensus_step(state, msg, now)


def _dispatch(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult) -> None:
    kind = msg.kind
    if kind == "SYNC":
        _on_sync(state, msg, now, res)
        return
    h = state.height
    if msg.height < h:
        state.dropped += 1
        if kind == "ROUNDCHANGE":
            _answer_laggard(state, msg, now, res)
        return
    if msg.height > h:
        if len(state.future) < 4096:
            state.future.append(msg)
        _ask_sync(state, msg.sender, now, res)
        return
    if kind == "DECISION":
        _on_decision(state, msg, now, res)
        return
    if kind == "ROUNDCHANGE":
        _on_roundchange(state, msg, now, res)
        return
    if not state.started:
        # a node that missed the block tick joins on the first message it sees
        _enter_round(state, 0, now, res)
    rnd = state.rs.round
    if msg.round < rnd:
        state.dropped += 1
        return
    if msg.round > rnd:
        if kind == "PROPOSE" and _justified(state, msg):
            _change_round(state, msg.round, now, res, announce=False)
        else:
            if len(state.future) < 4096:
                state.future.append(msg)
            return
    if kind == "PROPOSE":
        _on_propose(state, msg, now, res)
    elif kind == "PREPARE":
        _on_vote(state, msg, now, res, state.rs.prepare_votes)
        _check_prepare_quorum(state, res.at, res)
    elif kind == "COMMIT":
        _on_vote(state, msg, now, res, state.rs.commit_votes)
        _check_commit_quorum(state, res.at, res)
    else:
        state.dropped += 1


def _on_propose(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult) -> None:
    rs = state.rs
    block = msg.block
    if msg.sender != rs.leader or block is None or block.digest != msg.digest:
        state.dropped += 1
        return
    if not _sig_ok(msg.sender, proposal_payload(msg.height, msg.round, msg.digest), msg.sig):
        state.dropped += 1
        return
    prior = state.proposals_seen.get(msg.round)
    if prior is not None:
        if prior != msg.digest:
            state.evidence.append(("conflicting-propose", msg.height, msg.round, msg.sender))
        else:
            state.dropped += 1
        return
    if msg.round > 0 and not _justified(state, msg):
        state.dropped += 1
        return
    hdr = block.header
    if (hdr.height != state.height or hdr.prev_digest != state.chain.tip.digest
            or hdr.round != msg.round and msg.justification == ()
            or not merkle_ok(block)
            or any(state.chain.contains_tx(t.tx_id) for t in block.txs)):
        state.dropped += 1
        return
    state.proposals_seen[msg.round] = msg.digest
    t = now + state.cfg.block_validation_ms
    state.busy_until = max(state.busy_until, t)
    res.at = t
    rs.proposed_block = block
    rs.proposal_sig = msg.sig
    rs.phase = Phase.PROPOSED
    if msg.vote is not None and vote_ok(msg.vote) and msg.vote.digest == msg.digest:
        rs.prepare_votes.setdefault(msg.digest, {}).setdefault(msg.sender, msg.vote)
    if state.is_validator:
        state.voted = (msg.round, block, msg.sig)
        d = msg.digest
        if state.byzantine:
            d = digest(f"equivocate|{state.id}|{state.rng.random()}".encode())
        vote = Vote.make("PREPARE", state.height, rs.round, d, state.id)
        rs.prepare_votes.setdefault(d, {}).setdefault(state.id, vote)
        res.out.append((_peers(state, rs.validators),
                        ConsensusMsg("PREPARE", state.id, state.height, rs.round, d, vote=vote)))
    _check_prepare_quorum(state, t, res)
    if state.cfg.protocol == FASTPATH and t > rs.fast_path_deadline:
        _send_commit(state, t, res)


def _on_vote(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult, book: dict) -> None:
    v = msg.vote
    rs = state.rs
    if (v is None or v.signer != msg.sender or v.signer not in rs.validators
            or v.round != rs.round or v.height != state.height or v.kind != msg.kind
            or not vote_ok(v)):
        state.dropped += 1
        return
    for other_digest, votes in book.items():
        if v.signer in votes:
            if other_digest != v.digest:
                state.evidence.append(("double-vote", v.height, v.round, v.signer))
            else:
                state.dropped += 1
            return
    book.setdefault(v.digest, {})[v.signer] = v


def _quorum(state: NodeState) -> int:
    return state.rs.quorum


def _check_prepare_quorum(state: NodeState, now: float, res: StepResult) -> None:
    rs = state.rs
    block = rs.proposed_block
    if block is None or rs.phase not in (Phase.PROPOSED, Phase.COMMITTING):
        return
    votes = rs.prepare_votes.get(block.digest, {})
    if len(votes) < _quorum(state):
        return
    if state.cfg.protocol == FASTPATH and rs.phase == Phase.PROPOSED and now <= rs.fast_path_deadline:
        cert = Certificate(block.digest, state.height, rs.round, frozenset(votes.values()),
                           "fast-path", rs.validators)
        _finalize(state, block.with_certificate(cert), now, res, Phase.PREPARED)
    else:
        _send_commit(state, now, res)


def _send_commit(state: NodeState, now: float, res: StepResult) -> None:
    rs = state.rs
    if rs.commit_sent or rs.proposed_block is None or not state.is_validator:
        return
    rs.commit_sent = True
    rs.phase = Phase.COMMITTING
    d = rs.proposed_block.digest
    if state.byzantine:
        d = digest(f"equivocate-c|{state.id}|{state.rng.random()}".encode())
    vote = Vote.make("COMMIT", state.height, rs.round, d, state.id)
    rs.commit_votes.setdefault(d, {}).setdefault(state.id, vote)
    res.out.append((_peers(state, rs.validators),
                    ConsensusMsg("COMMIT", state.id, state.height, rs.round, d, vote=vote)))
    _check_commit_quorum(state, now, res)


def _check_commit_quorum(state: NodeState, now: float, res: StepResult) -> None:
    rs = state.rs
    block = rs.proposed_block
    if block is None or rs.phase in (Phase.PREPARED, Phase.DECIDED):
        return
    votes = rs.commit_votes.get(block.digest, {})
    if len(votes) < _quorum(state):
        return
    cert = Certificate(block.digest, state.height, rs.round, frozenset(votes.values()),
                       "commit-path", rs.validators)
    _finalize(state, block.with_certificate(cert), now, res, Phase.DECIDED)


def _finalize(state: NodeState, block: Block, now: float, res: StepResult, phase: Phase,
              announce: bool = True) -> None:
    append_block(state.chain, block, check_merkle=False)
    state.rs.phase = phase
    res.finalized.append(block)
    if announce:
        msg = ConsensusMsg("DECISION", state.id, block.height, block.certificate.round,
                           block.digest, block=block, cert=block.certificate,
                           msg_id=f"DEC|{block.height}|{block.digest}")
        res.out.append((GOSSIP, msg))
    _next_height(state)
    _drain_future(state, now, res)


def _next_height(state: NodeState) -> None:
    state.rs = RoundState()
    state.started = False
    state.voted = None
    state.rc_msgs = {}
    state.proposals_seen = {}
    h = state.height
    for k in [k for k in state.sync_asked if k < h]:
        del state.sync_asked[k]


def _drain_future(state: NodeState, now: float, res: StepResult) -> None:
    if not state.future:
        return
    pending, state.future = state.future, []
    for m in pending:
        if m.height < state.height:
            continue
        if m.height > state.height or (state.started and m.round > state.rs.round
                                       and m.kind not in ("PROPOSE", "ROUNDCHANGE", "DECISION")):
            state.future.append(m)
            continue
        _dispatch(state, m, now, res)


def _certificate_ok(state: NodeState, block: Block | None, cert: Certificate | None) -> bool:
    if block is None or cert is None or cert.block_digest != block.digest:
        return False
    if block.height != state.height or block.header.prev_digest != state.chain.tip.digest:
        return False
    _, vals = _setup(state, cert.round)
    if cert.validators != vals or cert.height != block.height:
        return False
    need = quorum_threshold(len(vals))
    want = "PREPARE" if cert.kind == "fast-path" else "COMMIT"
    signers = set()
    for v in cert.votes:
        if (v.kind != want or v.digest != cert.block_digest or v.round != cert.round
                or v.height != cert.height or v.signer not in vals or not vote_ok(v)):
            return False
        signers.add(v.signer)
    if cert.kind == "fast-path" and state.cfg.protocol == PBFT:
        return False
    return len(signers) >= need


def _on_decision(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult) -> None:
    if not _certificate_ok(state, msg.block, msg.cert):
        state.dropped += 1
        return
    if not merkle_ok(msg.block):
        state.dropped += 1
        return
    block = msg.block if msg.block.certificate is not None else msg.block.with_certificate(msg.cert)
    _finalize(state, block, now, res, Phase.DECIDED, announce=False)


# -- synchronisation ---------------------------------------------------------

def _ask_sync(state: NodeState, target: int, now: float, res: StepResult) -> None:
    h = state.height
    last = state.sync_asked.get(h)
    if last is not None and now - last < state.cfg.round_timeout_ms:
        return
    state.sync_asked[h] = now
    res.out.append(((target,), ConsensusMsg("SYNC", state.id, h, 0)))


def _answer_laggard(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult) -> None:
    # only the would-be leader of the laggard's round answers, to bound traffic
    if msg.height > state.chain.height:
        return
    prev = state.chain.blocks[msg.height - 1].digest
    leader, _ = round_setup(prev, msg.round, state.plugged, state.nodes, state.cfg.alpha_percent)
    if leader != state.id:
        return
    blocks = tuple(state.chain.blocks[msg.height:])
    res.out.append(((msg.sender,), ConsensusMsg("SYNC", state.id, msg.height, 0, blocks=blocks)))


def _on_sync(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult) -> None:
    if not msg.blocks:
        if msg.height <= state.chain.height:
            blocks = tuple(state.chain.blocks[msg.height:])
            res.out.append(((msg.sender,), ConsensusMsg("SYNC", state.id, msg.height, 0,
                                                        blocks=blocks)))
        return
    appended = False
    for block in msg.blocks:
        if block.height < state.height:
            continue
        if block.height > state.height or not _certificate_ok(state, block, block.certificate):
            break
        try:
            append_block(state.chain, block)
        except BlockRejected:
            break
        res.finalized.append(block)
        _next_height(state)
        appended = True
    if appended:
        _drain_future(state, now, res)


# -- round change ------------------------------------------------------------

def on_timeout(state: NodeState, timer_kind: str, now: float, height: int | None = None,
               rnd: int | None = None) -> StepResult:
    """Fast-path expiry moves to COMMITTING; round expiry starts round + 1."""
    res = StepResult(at=now)
    rs = state.rs
    if height is not None and (height != state.height or rnd != rs.round or not state.started):
        return res
    if timer_kind == FAST_TIMER:
        if state.cfg.protocol == FASTPATH and rs.phase == Phase.PROPOSED:
            _send_commit(state, now, res)
    elif timer_kind == ROUND_TIMER:
        if rs.phase not in (Phase.PREPARED, Phase.DECIDED):
            _change_round(state, rs.round + 1, now, res, announce=True)
    else:
        raise ConsensusError(f"unknown timer {timer_kind!r}")
    return res


def _change_round(state: NodeState, new_round: int, now: float, res: StepResult,
                  announce: bool) -> None:
    state.round_changes += 1
    _enter_round(state, new_round, now, res)
    rs = state.rs
    for r in [r for r in state.rc_msgs if r < new_round]:
        del state.rc_msgs[r]
    report = state.voted
    msg = ConsensusMsg("ROUNDCHANGE", state.id, state.height, new_round, report=report,
                       sig=sign(state.id, rc_payload(state.height, new_round, report)))
    state.rc_msgs.setdefault(new_round, {})[state.id] = msg
    if announce:
        res.out.append((_peers(state, rs.validators), msg))
    _maybe_repropose(state, now, res)
    _drain_future(state, now, res)


def _rc_ok(state: NodeState, m: ConsensusMsg) -> bool:
    if m.kind != "ROUNDCHANGE" or m.height != state.height:
        return False
    if not _sig_ok(m.sender, rc_payload(m.height, m.round, m.report), m.sig):
        return False
    if m.report is not None:
        vr, block, psig = m.report
        if vr >= m.round or block.height != m.height:
            return False
        if block.header.prev_digest != state.chain.tip.digest:
            return False
        vleader, _ = _setup(state, vr)
        if not _sig_ok(vleader, proposal_payload(m.height, vr, block.digest), psig):
            return False
    return True


def _on_roundchange(state: NodeState, msg: ConsensusMsg, now: float, res: StepResult) -> None:
    if not _rc_ok(state, msg):
        state.dropped += 1
        return
    if state.started and msg.round < state.rs.round:
        state.dropped += 1
        return
    book = state.rc_msgs.setdefault(msg.round, {})
    if msg.sender in book:
        state.dropped += 1
        return
    book[msg.sender] = msg
    _, vals = _setup(state, msg.round)
    f = (len(vals) - 1) // 3
    cur = state.rs.round if state.started else -1
    if msg.round > cur and len(book) >= f + 1 and state.id in vals:
        # enough peers moved on: follow them instead of waiting out the timer
        _change_round(state, msg.round, now, res, announce=True)
        return
    if state.started and msg.round == state.rs.round:
        _maybe_repropose(state, now, res)


def choose_reproposal(msgs: Iterable[ConsensusMsg]) -> Block | None:
    """Block carried by the highest-round vote report, if any."""
    best = None
    for m in msgs:
        if m.report is None:
            continue
        vr, block, _ = m.report
        key = (vr, block.digest)
        if best is None or key[0] > best[0][0] or (key[0] == best[0][0] and key[1] < best[0][1]):
            best = (key, block)
    return None if best is None else best[1]


def _maybe_repropose(state: NodeState, now: float, res: StepResult) -> None:
    rs = state.rs
    if rs.leader != state.id or rs.proposed or rs.round == 0:
        return
    book = state.rc_msgs.get(rs.round, {})
    if len(book) < _quorum(state):
        return
    just = tuple(sorted(book.values(), key=lambda m: m.sender))
    reuse = choose_reproposal(just)
    t = max(now, res.at)
    # a fresh block after a round change still only carries the height's batch
    pool = state.pool_source(state.height_started) if (reuse is None and state.pool_source) else ()
    _merge(res, propose(state, pool, t, justification=just, reuse=reuse))


def _justified(state: NodeState, msg: ConsensusMsg) -> bool:
    """Round > 0 proposals need a quorum of round-change messages for that round."""
    if msg.kind != "PROPOSE" or msg.round == 0:
        return msg.round == 0
    leader, vals = _setup(state, msg.round)
    if msg.sender != leader or msg.block is None:
        return False
    senders = set()
    for m in msg.justification:
        if m.round != msg.round or m.sender not in vals or m.sender in senders or not _rc_ok(state, m):
            return False
        senders.add(m.sender)
    if len(senders) < quorum_threshold(len(vals)):
        return False
    must = choose_reproposal(msg.justification)
    return must is None or must.digest == msg.block.digest
