"""Hash-chained blocks, settlement transactions, wallets and light clients."""
from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

GENESIS_PREV = "0" * 64


class BlockRejected(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class SyncError(RuntimeError):
    pass


class SettlementError(ValueError):
    pass


# -- canonical serialization -------------------------------------------------

def canonical_bytes(obj) -> bytes:
    """Deterministic encoding: dataclass fields in declaration order,
    integers as 8-byte big-endian, reals as shortest round-trip text."""
    out = bytearray()
    _encode(obj, out)
    return bytes(out)


def _encode(obj, out: bytearray) -> None:
    if obj is None:
        out += b"N"
    elif isinstance(obj, bool):
        out += b"T" if obj else b"F"
    elif isinstance(obj, int):
        out += b"i" + obj.to_bytes(8, "big", signed=True)
    elif isinstance(obj, float):
        text = repr(obj).encode()
        out += b"f" + struct.pack(">I", len(text)) + text
    elif isinstance(obj, str):
        data = obj.encode()
        out += b"s" + struct.pack(">I", len(data)) + data
    elif isinstance(obj, (bytes, bytearray)):
        out += b"b" + struct.pack(">I", len(obj)) + bytes(obj)
    elif dataclasses.is_dataclass(obj):
        vals = [getattr(obj, f.name) for f in dataclasses.fields(obj)]
        out += b"d" + struct.pack(">I", len(vals))
        for v in vals:
            _encode(v, out)
    elif isinstance(obj, (list, tuple)):
        out += b"l" + struct.pack(">I", len(obj))
        for v in obj:
            _encode(v, out)
    elif isinstance(obj, (set, frozenset)):
        items = sorted(obj, key=canonical_bytes)
        _encode(items, out)
    elif isinstance(obj, dict):
        out += b"m" + struct.pack(">I", len(obj))
        for k in sorted(obj):
            _encode(k, out)
            _encode(obj[k], out)
    else:
        raise TypeError(f"cannot canonically encode {type(obj).__name__}")


def digest(data: bytes) -> str:
    """SHA-256 as lowercase hex."""
    return hashlib.sha256(data).hexdigest()


def digest_of(obj) -> str:
    return digest(canonical_bytes(obj))


def sign(signer: int | str, payload: str) -> str:
    # simulated signature; swap sign/verify_signature for a real scheme
    return hashlib.sha256(f"{signer}|{payload}".encode()).hexdigest()


@functools.lru_cache(maxsize=1 << 18)
def verify_signature(signer: int | str, payload: str, sig: str) -> bool:
    return sign(signer, payload) == sig


# -- transactions ------------------------------------------------------------

@dataclass(frozen=True)
class SettlementBody:
    ev_id: str
    slot: int
    mode: str            # charge | discharge | idle
    x: float
    energy_kwh: float    # signed, + into the battery
    price: float         # CNY/kWh (p_c, p_d) or p_delay for idle
    amount: float        # price * energy
    service_fee: float   # CNY, charging only
    compensation: float  # CNY, idle only
    ev_sig: str = ""
    scp_sig: str = ""


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    kind: str            # synthetic | settlement
    submitted_at: float
    size: float = 0.01
    body: object = None

    @classmethod
    def synthetic(cls, origin: int, seq: int, submitted_at: float, size: float = 0.01) -> "Transaction":
        body = (origin, seq)
        return cls(digest(f"syn|{origin}|{seq}".encode()), "synthetic", submitted_at, size, body)

    @classmethod
    def settlement(cls, body: SettlementBody, submitted_at: float, size: float = 0.01) -> "Transaction":
        if abs(body.amount - body.price * body.energy_kwh) > 1e-9:
            raise SettlementError("settlement amount must equal price x energy")
        return cls(digest_of(body), "settlement", submitted_at, size, body)


def settlement_delta(tx: Transaction) -> float:
    """Wallet change for the EV named in a settlement."""
    b = tx.body
    if b.mode == "charge":
        return -(b.amount + b.service_fee)
    if b.mode == "discharge":
        return abs(b.amount)
    if b.mode == "idle":
        return abs(b.compensation)
    raise SettlementError(f"unknown settlement mode {b.mode!r}")


# -- votes, certificates, blocks --------------------------------------------

@dataclass(frozen=True)
class Vote:
    kind: str        # PREPARE | COMMIT
    height: int
    round: int
    digest: str
    signer: int
    sig: str

    @property
    def payload(self) -> str:
        return f"{self.kind}|{self.height}|{self.round}|{self.digest}"

    @classmethod
    def make(cls, kind: str, height: int, rnd: int, block_digest: str, signer: int) -> "Vote":
        return cls(kind, height, rnd, block_digest, signer,
                   sign(signer, f"{kind}|{height}|{rnd}|{block_digest}"))

    def verify(self) -> bool:
        return verify_signature(self.signer, self.payload, self.sig)

    @functools.cached_property
    def valid(self) -> bool:
        return self.verify()


def quorum_threshold(n: int) -> int:
    """Smallest vote count strictly above two thirds of ``n``."""
    if n < 1:
        raise ValueError("validator count must be >= 1")
    return (2 * n) // 3 + 1


@dataclass(frozen=True)
class Certificate:
    block_digest: str
    height: int
    round: int
    votes: frozenset
    kind: str                      # fast-path | commit-path
    validators: frozenset = frozenset()

    def problems(self) -> list[str]:
        out = []
        need = quorum_threshold(max(len(self.validators), 1))
        signers = {v.signer for v in self.votes}
        if len(signers) < need:
            out.append(f"certificate has {len(signers)} votes, quorum is {need}")
        want = "PREPARE" if self.kind == "fast-path" else "COMMIT"
        for v in self.votes:
            if v.digest != self.block_digest or v.round != self.round or v.height != self.height:
                out.append("vote references a different block or round")
                break
            if v.kind != want:
                out.append(f"{self.kind} certificate holds a {v.kind} vote")
                break
            if self.validators and v.signer not in self.validators:
                out.append(f"vote from non-validator {v.signer}")
                break
            if not v.valid:
                out.append(f"bad signature from {v.signer}")
                break
        return out

    def is_valid(self) -> bool:
        return not self.problems()


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_digest: str
    merkle_root: str
    round: int
    timestamp: float
    leader: int

    @functools.cached_property
    def digest(self) -> str:
        return digest_of(self)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple = ()
    certificate: Certificate | None = None

    @property
    def digest(self) -> str:
        return self.header.digest

    @property
    def height(self) -> int:
        return self.header.height

    def with_certificate(self, cert: Certificate) -> "Block":
        return dataclasses.replace(self, certificate=cert)

    @classmethod
    def assemble(cls, height: int, prev_digest: str, rnd: int, timestamp: float,
                 leader: int, txs: Sequence[Transaction]) -> "Block":
        root = merkle_root([t.tx_id for t in txs])
        return cls(BlockHeader(height, prev_digest, root, rnd, timestamp, leader), tuple(txs))


def genesis_block() -> Block:
    return Block(BlockHeader(0, GENESIS_PREV, merkle_root([]), 0, 0.0, -1))


# -- merkle ------------------------------------------------------------------

def _leaf(tx_id: str) -> str:
    return digest(bytes.fromhex(tx_id) if _is_hex(tx_id) else tx_id.encode())


def _is_hex(s: str) -> bool:
    try:
        bytes.fromhex(s)
    except ValueError:
        return False
    return True


def _parent(left: str, right: str) -> str:
    return digest(bytes.fromhex(left) + bytes.fromhex(right))


def _levels(tx_ids: Sequence[str]) -> list[list[str]]:
    level = [_leaf(t) for t in tx_ids]
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
            levels[-1] = level
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


_ROOT_CACHE: dict[int, tuple[Block, bool]] = {}


def merkle_ok(block: "Block") -> bool:
    """Whether the block's header commits to its transaction list (memoized per object)."""
    hit = _ROOT_CACHE.get(id(block))
    if hit is not None and hit[0] is block:
        return hit[1]
    ok = merkle_root([t.tx_id for t in block.txs]) == block.header.merkle_root
    if len(_ROOT_CACHE) > 4096:
        _ROOT_CACHE.clear()
    _ROOT_CACHE[id(block)] = (block, ok)
    return ok


def merkle_levels(tx_ids: Sequence[str]) -> list[list[str]]:
    return _levels(tx_ids)


def merkle_root(tx_ids: Sequence[str]) -> str:
    if not tx_ids:
        return digest(b"")
    return _levels(tx_ids)[-1][0]


def inclusion_proof(tx_ids: Sequence[str], index: int,
                    levels: list[list[str]] | None = None) -> list[tuple[str, str]]:
    """Sibling path from leaf ``index`` to the root as (hash, side) pairs.

    Pass precomputed ``levels`` (from :func:`merkle_levels`) when proving many
    leaves of the same block.
    """
    if not 0 <= index < len(tx_ids):
        raise IndexError(f"leaf index {index} out of range for {len(tx_ids)} txs")
    proof = []
    for level in (levels or _levels(tx_ids))[:-1]:
        sib = index ^ 1
        proof.append((level[sib], "L" if sib < index else "R"))
        index //= 2
    return proof


def verify_inclusion(root: str, tx_id: str, proof: Iterable[tuple[str, str]]) -> bool:
    h = _leaf(tx_id)
    for sib, side in proof:
        if side == "L":
            h = _parent(sib, h)
        elif side == "R":
            h = _parent(h, sib)
        else:
            return False
    return h == root


# -- chain -------------------------------------------------------------------

class Chain:
    """Finalized blocks held by one node, genesis at height 0."""

    def __init__(self, genesis: Block | None = None):
        self.blocks: list[Block] = [genesis or genesis_block()]
        self.height = self.blocks[-1].height
        self._tx_index: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]


    def contains_tx(self, tx_id: str) -> bool:
        return tx_id in self._tx_index

    def height_of_tx(self, tx_id: str) -> int | None:
        return self._tx_index.get(tx_id)

    def headers(self) -> list[BlockHeader]:
        return [b.header for b in self.blocks]

    def _push(self, block: Block) -> None:
        self.blocks.append(block)
        self.height = block.height
        for t in block.txs:
            self._tx_index.setdefault(t.tx_id, block.height)


def append_block(chain: Chain, block: Block, check_merkle: bool = True) -> Chain:
    """Extend ``chain`` by a certified block; duplicates are ignored."""
    h = block.height
    if h <= chain.height:
        if chain.blocks[h].digest == block.digest:
            return chain
        raise BlockRejected(f"conflicting block at height {h}")
    if h != chain.height + 1:
        raise BlockRejected(f"height gap: tip {chain.height}, block {h}")
    if block.header.prev_digest != chain.tip.digest:
        raise BlockRejected("prev_digest does not match tip")
    cert = block.certificate
    if cert is None:
        raise BlockRejected("missing certificate")
    if cert.block_digest != block.digest or cert.height != h:
        raise BlockRejected("certificate references another block")
    issues = cert.problems()
    if issues:
        raise BlockRejected(issues[0])
    if check_merkle and not merkle_ok(block):
        raise BlockRejected("merkle root mismatch")
    chain._push(block)
    return chain


# -- wallets -----------------------------------------------------------------

@dataclass
class Wallet:
    owner: str
    initial: float = 0.0
    balance: float = 0.0
    history: list[tuple[str, int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.history:
            self.balance = self.initial


def wallet_apply(wallet: Wallet, tx: Transaction, chain: Chain) -> Wallet:
    if tx.kind != "settlement":
        raise SettlementError("only settlement transactions touch wallets")
    if tx.body.ev_id != wallet.owner:
        raise SettlementError(f"settlement for {tx.body.ev_id} applied to {wallet.owner}")
    if not chain.contains_tx(tx.tx_id):
        raise SettlementError(f"transaction {tx.tx_id[:12]} is not finalized")
    delta = settlement_delta(tx)
    wallet.balance += delta
    wallet.history.append((tx.tx_id, tx.body.slot, delta, wallet.balance))
    return wallet


def write_wallets_csv(wallets: Iterable[Wallet], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ev_id", "tx_id", "slot", "delta_cny", "balance_cny"])
        for wal in wallets:
            for tx_id, slot, delta, bal in wal.history:
                w.writerow([wal.owner, tx_id, slot, repr(delta), repr(bal)])


# -- light clients -----------------------------------------------------------

@dataclass
class LightClient:
    ev_id: str
    headers: list[BlockHeader] = field(default_factory=list)
    records: dict[str, tuple[int, Transaction, list]] = field(default_factory=dict)

    @property
    def synced_height(self) -> int:
        return self.headers[-1].height if self.headers else -1

    def verify_all(self) -> list[str]:
        """tx_ids whose stored proof no longer matches its header."""
        by_height = {h.height: h for h in self.headers}
        bad = []
        for tx_id, (height, _tx, proof) in self.records.items():
            hdr = by_height.get(height)
            if hdr is None or not verify_inclusion(hdr.merkle_root, tx_id, proof):
                bad.append(tx_id)
        return bad


def sync_light_client(client: LightClient, chain: Chain, ev_id: str | None = None) -> LightClient:
    """Pull new headers plus the client's own settlements with proofs."""
    ev_id = ev_id or client.ev_id
    start = client.synced_height + 1
    if start > chain.height:
        return client
    prev = client.headers[-1] if client.headers else None
    new_headers = []
    new_records = {}
    for block in chain.blocks[start:]:
        hdr = block.header
        if prev is not None and hdr.prev_digest != prev.digest:
            raise SyncError(f"header chain broken at height {hdr.height}")
        ids = [t.tx_id for t in block.txs]
        for i, t in enumerate(block.txs):
            if t.kind == "settlement" and t.body.ev_id == ev_id:
                proof = inclusion_proof(ids, i)
                if not verify_inclusion(hdr.merkle_root, t.tx_id, proof):
                    raise SyncError(f"inclusion proof failed for {t.tx_id[:12]}")
                new_records[t.tx_id] = (hdr.height, t, proof)
        new_headers.append(hdr)
        prev = hdr
    client.headers.extend(new_headers)
    client.records.update(new_records)
    return client


def sync_light_clients(clients: dict[str, LightClient], chain: Chain) -> dict[str, LightClient]:
    """Sync many clients in one pass; each block's Merkle tree is built once.

    All clients must share the same synced height.
    """
    if not clients:
        return clients
    heights = {c.synced_height for c in clients.values()}
    if len(heights) != 1:
        raise SyncError("batched sync needs clients at a common height")
    start = heights.pop() + 1
    if start > chain.height:
        return clients
    any_client = next(iter(clients.values()))
    prev = any_client.headers[-1] if any_client.headers else None
    new_headers = []
    new_records: dict[str, dict] = {}
    for block in chain.blocks[start:]:
        hdr = block.header
        if prev is not None and hdr.prev_digest != prev.digest:
            raise SyncError(f"header chain broken at height {hdr.height}")
        ids = [t.tx_id for t in block.txs]
        levels = None
        for i, t in enumerate(block.txs):
            if t.kind != "settlement" or t.body.ev_id not in clients:
                continue
            if levels is None:
                levels = _levels(ids)
                if levels[-1][0] != hdr.merkle_root:
                    raise SyncError(f"merkle root mismatch at height {hdr.height}")
            new_records.setdefault(t.body.ev_id, {})[t.tx_id] = (
                hdr.height, t, inclusion_proof(ids, i, levels))
        new_headers.append(hdr)
        prev = hdr
    for ev_id, client in clients.items():
        client.headers.extend(new_headers)
        client.records.update(new_records.get(ev_id, {}))
    return clients


# -- dumps -------------------------------------------------------------------

def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        items = [_jsonable(v) for v in obj]
        return sorted(items, key=lambda v: json.dumps(v, sort_keys=True))
    return obj


def block_to_dict(block: Block) -> dict:
    d = _jsonable(block)
    d["digest"] = block.digest
    return d


def write_chain_jsonl(chain: Chain, path) -> None:
    with open(path, "w") as fh:
        for b in chain.blocks:
            fh.write(json.dumps(block_to_dict(b), sort_keys=True) + "\n")
