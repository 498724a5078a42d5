"""Scenario inputs, the oracle feed and the slot-by-slot trading loop.

A trading day runs the market once per 15-minute slot and turns every EV's
decision into a settlement transaction. Settlements go through the consensus
simulator on a compressed clock (``slot_ms`` of consensus time per slot);
wallets and light clients only see a settlement once it is finalized.

Sessions that end the next morning are handled by simulating a warm-up day
before the reported day, with every EV repeating its Table-style routine
daily. The reported day therefore sees each vehicle's overnight tail with the
state of charge it actually reached.
"""
from __future__ import annotations

import copy
import csv
import json
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .aggregator import (EvaParams, FleetSlice,
                         SlotOutcome, optimize_discharge_price, slot_revenue, uc_slot,
                         write_slots_csv)
from .consensus import BenchConfig, ConsensusConfig, ConsensusSim
from .consensus.metrics import ConsensusMetrics, compute_metrics, write_metrics_csv
from .ledger import (Chain, LightClient, SettlementBody, Transaction, Wallet, sign,
                     sync_light_clients, wallet_apply, write_chain_jsonl, write_wallets_csv)
from .market import CHARGE as CHARGE_MODE, DISCHARGE as DISCHARGE_MODE, IDLE as IDLE_MODE
from .market import LN2, BatteryModel, EvProfile, MarketError
from .simcore import ConfigurationError, NetParams

SLOTS_PER_DAY = 96
SLOT_MINUTES = 15
DATA_DIR = Path(__file__).parent / "data"
V2G = "v2g"
UC = "uc"
SCHEMES = (V2G, UC)


class ScenarioError(ConfigurationError):
    pass


class FleetError(ScenarioError):
    pass


# -- time helpers ------------------------------------------------------------

def parse_hhmm(text: str, allow_24: bool = False) -> int:
    """``"HH:MM"`` to minutes after midnight."""
    try:
        hh, mm = text.strip().split(":")
        h, m = int(hh), int(mm)
    except (ValueError, AttributeError):
        raise ScenarioError(f"malformed time {text!r}") from None
    if not 0 <= m < 60 or not 0 <= h <= 24 or (h == 24 and (m or not allow_24)):
        raise ScenarioError(f"time out of range {text!r}")
    return 60 * h + m


def hhmm_to_slot(text: str) -> int:
    minutes = parse_hhmm(text)
    if minutes % SLOT_MINUTES:
        raise ScenarioError(f"time {text!r} is not on a 15-minute boundary")
    return minutes // SLOT_MINUTES


def slot_label(slot: int) -> str:
    m = (slot % SLOTS_PER_DAY) * SLOT_MINUTES
    return f"{m // 60:02d}:{m % 60:02d}"


# -- time-of-use tariff ------------------------------------------------------

@dataclass(frozen=True)
class TouPeriod:
    start: int   # minutes, inclusive
    end: int     # minutes, exclusive
    tier: str
    price: float


@dataclass
class TouSchedule:
    periods: list[TouPeriod]

    def __post_init__(self):
        ps = sorted(self.periods, key=lambda p: p.start)
        if not ps:
            raise ScenarioError("empty ToU schedule")
        cursor = 0
        for p in ps:
            if p.start != cursor:
                kind = "gap" if p.start > cursor else "overlap"
                raise ScenarioError(f"ToU schedule has a {kind} at minute {cursor}")
            if p.end <= p.start:
                raise ScenarioError(f"ToU period {p} is empty")
            if p.price <= 0:
                raise ScenarioError("ToU prices must be positive")
            cursor = p.end
        if cursor != 24 * 60:
            raise ScenarioError("ToU schedule does not reach 24:00")
        self.periods = ps
        self._by_slot = [self._lookup(s * SLOT_MINUTES) for s in range(SLOTS_PER_DAY)]

    def _lookup(self, minute: int) -> TouPeriod:
        for p in self.periods:
            if p.start <= minute < p.end:
                return p
        raise ScenarioError(f"no ToU period covers minute {minute}")

    def price(self, slot: int) -> float:
        return self._by_slot[slot].price

    def tier(self, slot: int) -> str:
        return self._by_slot[slot].tier

    def prices(self) -> np.ndarray:
        return np.array([p.price for p in self._by_slot])

    @classmethod
    def from_dict(cls, raw: dict) -> "TouSchedule":
        try:
            periods = [TouPeriod(parse_hhmm(p["start"]), parse_hhmm(p["end"], allow_24=True),
                                 str(p["tier"]), float(p["price"])) for p in raw["periods"]]
        except (KeyError, TypeError) as e:
            raise ScenarioError(f"bad ToU entry: {e}") from None
        return cls(periods)

    @classmethod
    def from_json(cls, path) -> "TouSchedule":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def tou_price(schedule: TouSchedule, slot: int) -> float:
    if not 0 <= slot < SLOTS_PER_DAY:
        raise ScenarioError(f"slot {slot} outside 0..95")
    return schedule.price(slot)


# -- loads and the oracle ----------------------------------------------------

@dataclass
class LoadProfile:
    l_base: list[float]
    l_predicted: list[float]

    def __post_init__(self):
        if len(self.l_base) != SLOTS_PER_DAY or len(self.l_predicted) != SLOTS_PER_DAY:
            raise ScenarioError("load profile needs 96 entries")
        if min(self.l_base) < 0 or min(self.l_predicted) < 0:
            raise ScenarioError("loads must be non-negative")

    def scaled(self, k: float) -> "LoadProfile":
        return LoadProfile([k * v for v in self.l_base], [k * v for v in self.l_predicted])

    @classmethod
    def from_csv(cls, path) -> "LoadProfile":
        base = [None] * SLOTS_PER_DAY
        pred = [None] * SLOTS_PER_DAY
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    s = int(row["slot"])
                    base[s] = float(row["l_base_kw"])
                    pred[s] = float(row["l_predicted_kw"])
                except (KeyError, ValueError, IndexError, TypeError) as e:
                    raise ScenarioError(f"{path}:{lineno}: bad load row ({e})") from None
        if None in base or None in pred:
            raise ScenarioError(f"{path}: missing slots")
        return cls(base, pred)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "l_base_kw", "l_predicted_kw"])
            for s in range(SLOTS_PER_DAY):
                w.writerow([s, f"{self.l_base[s]:.3f}", f"{self.l_predicted[s]:.3f}"])


def synthetic_load_profile(seed: int = 7, base_kw: float = 60.0, swing_kw: float = 40.0,
                           error_kw: float = 12.0) -> LoadProfile:
    """Campus-like base load with a day-ahead forecast that under-predicts daytime peaks.

    Synthetic stand-in for the measured profile; nothing here is real data.
    """
    rng = np.random.default_rng(seed)
    h = (np.arange(SLOTS_PER_DAY) + 0.5) * SLOT_MINUTES / 60.0
    shape = np.exp(-((h - 11.0) / 2.5) ** 2) + 0.9 * np.exp(-((h - 16.5) / 2.8) ** 2)
    base = base_kw + swing_kw * shape + rng.normal(0.0, 2.0, SLOTS_PER_DAY)
    err = error_kw * (shape - 0.3) + rng.normal(0.0, 3.0, SLOTS_PER_DAY)
    pred = np.maximum(base - err, 0.0)
    return LoadProfile([round(float(v), 3) for v in base], [round(float(v), 3) for v in pred])


def compute_e_limit(loads: LoadProfile, slot: int, factor: float = 0.48) -> float:
    """Minimum auxiliary-service discharge; zero unless actual load exceeds the forecast."""
    return max(0.0, factor * (loads.l_base[slot] - loads.l_predicted[slot]))


@dataclass(frozen=True)
class OracleEntry:
    slot: int
    p_real_time: float
    e_limit: float
    w_grid: float
    p_d_min: float
    p_d_max: float


@dataclass
class OracleFeed:
    entries: list[OracleEntry]

    def __getitem__(self, slot: int) -> OracleEntry:
        return self.entries[slot % SLOTS_PER_DAY]

    @classmethod
    def build(cls, tou: TouSchedule, loads: LoadProfile, eva: EvaParams,
              factor: float = 0.48) -> "OracleFeed":
        out = []
        for s in range(SLOTS_PER_DAY):
            p = tou_price(tou, s)
            e = compute_e_limit(loads, s, factor)
            if e < 0:
                raise ScenarioError("E_limit must be >= 0")
            out.append(OracleEntry(s, p, e, eva.w_grid, eva.p_d_min(p), eva.p_d_max))
        return cls(out)


# -- fleet -------------------------------------------------------------------

FLEET_HEADER = ("ev_id", "capacity_kwh", "initial_kwh", "arrival", "departure",
                "next_day_departure_flag")


def load_fleet(path, beta: float = 0.81) -> list[EvProfile]:
    """Parse a fleet CSV; any bad row raises :class:`FleetError` naming its line."""
    fleet = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FLEET_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise FleetError(f"{path}: missing columns {missing}")
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            try:
                flag = row["next_day_departure_flag"].strip()
                if flag not in ("0", "1"):
                    raise ScenarioError(f"next-day flag must be 0 or 1, got {flag!r}")
                ev = EvProfile(
                    ev_id=row["ev_id"].strip(),
                    capacity=float(row["capacity_kwh"]),
                    initial_energy=float(row["initial_kwh"]),
                    arrival=hhmm_to_slot(row["arrival"]),
                    departure=hhmm_to_slot(row["departure"]),
                    next_day=flag == "1",
                    beta=beta,
                )
                if not 0 < ev.session_length <= SLOTS_PER_DAY:
                    raise ScenarioError("departure precedes arrival on a same-day session")
                if ev.ev_id in seen:
                    raise ScenarioError(f"duplicate ev_id {ev.ev_id}")
            except (ScenarioError, MarketError, ValueError, AttributeError) as e:
                raise FleetError(f"{path}:{lineno}: {e}") from None
            seen.add(ev.ev_id)
            fleet.append(ev)
    return fleet


def bootstrap_fleet(base: list[EvProfile], n: int, seed: int = 0, jitter: float = 0.10,
                    slot_jitter: int = 4) -> list[EvProfile]:
    """Synthetic cohort resampled from ``base`` with capacity, energy and time jitter."""
    if not base:
        raise FleetError("cannot bootstrap from an empty fleet")
    rng = random.Random(seed)
    out = []
    for k in range(n):
        src = base[rng.randrange(len(base))]
        cap = src.capacity * rng.uniform(1 - jitter, 1 + jitter)
        init = min(src.initial_energy * rng.uniform(1 - jitter, 1 + jitter), cap)
        arr = src.arrival + rng.randint(-slot_jitter, slot_jitter)
        length = src.session_length + rng.randint(-slot_jitter, slot_jitter)
        length = min(max(length, 1), SLOTS_PER_DAY)
        arr %= SLOTS_PER_DAY
        end = arr + length
        out.append(EvProfile(f"B{k:04d}-{src.ev_id}", round(cap, 3), min(round(init, 3), round(cap, 3)),
                             arr, end % SLOTS_PER_DAY, end >= SLOTS_PER_DAY, src.beta))
    return out


# -- scenario ----------------------------------------------------------------

@dataclass
class TradeSettings:
    nodes: int = 10
    faulty: int = 0
    slot_ms: float = 2000.0
    e_limit_factor: float = 0.48
    load_scale: float = 1.0
    bootstrap_evs: int = 0
    beta: float = 0.81
    discharge_offset: float = LN2
    light_clients: bool = True


@dataclass
class BenchGrid:
    """Consensus benchmark sweep; lives in the scenario's consensus section."""
    bench_nodes: list = field(default_factory=lambda: [12, 14, 16, 18, 20, 22, 24])
    bench_faulty: list = field(default_factory=lambda: [0])
    bench_seeds: int = 5
    bench_duration_s: float = 600.0
    bench_fault_mode: str = "crash"
    bench_tx_rate: float = 1.0


@dataclass
class Scenario:
    fleet_path: Path
    tou: TouSchedule
    loads: LoadProfile
    eva: EvaParams = field(default_factory=EvaParams)
    battery: BatteryModel = field(default_factory=BatteryModel)
    net: NetParams = field(default_factory=NetParams)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    trade: TradeSettings = field(default_factory=TradeSettings)
    bench: BenchGrid = field(default_factory=BenchGrid)
    scheme: str = "both"
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def schemes(self) -> list[str]:
        return list(SCHEMES) if self.scheme == "both" else [self.scheme]

    def fleet(self) -> list[EvProfile]:
        base = load_fleet(self.fleet_path, self.trade.beta)
        if self.trade.bootstrap_evs:
            return bootstrap_fleet(base, self.trade.bootstrap_evs, self.seed)
        return base

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "Scenario":
        """Read a scenario JSON (default: the packaged 12-EV scenario)."""
        path = Path(path) if path else DATA_DIR / "scenario_default.json"
        if not path.exists():
            raise ScenarioError(f"scenario file not found: {path}")
        with open(path) as fh:
            raw = json.load(fh)
        for item in overrides:
            apply_override(raw, item)
        if seed is not None:
            raw["seed"] = seed
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "Scenario":
        raw = copy.deepcopy(raw)
        if "seed" not in raw:
            raise ScenarioError("scenario needs a seed")
        base_dir = Path(base_dir) if base_dir else DATA_DIR
        files = raw.get("files", {})
        fleet_path = _resolve(files.get("fleet", "fleet_12ev.csv"), base_dir)
        tou = TouSchedule.from_json(_resolve(files.get("tou", "tou_shenzhen.json"), base_dir))
        loads = LoadProfile.from_csv(_resolve(files.get("loads", "loads_synthetic.csv"),
                                              base_dir))
        market = dict(raw.get("market", {}))
        network = dict(raw.get("network", {}))
        cons = dict(raw.get("consensus", {}))
        trade = {}
        for section, names in ((market, ("e_limit_factor", "load_scale", "bootstrap_evs", "beta",
                                         "discharge_offset")),
                               (network, ("nodes", "faulty", "light_clients")),
                               (cons, ("slot_ms",))):
            for name in names:
                if name in section:
                    trade[name] = section.pop(name)
        grid = {k: cons.pop(k) for k in list(cons) if k.startswith("bench_")}
        if isinstance(trade.get("discharge_offset"), str):
            if trade["discharge_offset"] != "ln2":
                raise ScenarioError("discharge_offset must be a number or 'ln2'")
            trade["discharge_offset"] = LN2
        eva = _build(EvaParams, market, "market")
        eva.validate()
        net = _build(NetParams, network, "network")
        net.validate()
        cc = _build(ConsensusConfig, cons, "consensus")
        cc.validate()
        battery = _build(BatteryModel, raw.get("battery", {}), "battery")
        ts = _build(TradeSettings, trade, "trade")
        bg = _build(BenchGrid, grid, "consensus")
        if ts.nodes < 4:
            raise ScenarioError("need at least 4 consensus nodes")
        if ts.slot_ms <= cc.block_interval_ms:
            raise ScenarioError("slot_ms must exceed block_interval_ms")
        if ts.load_scale != 1.0:
            loads = loads.scaled(ts.load_scale)
        scheme = raw.get("scheme", "both")
        if scheme not in SCHEMES + ("both",):
            raise ScenarioError(f"unknown scheme {scheme!r}")
        try:
            seed = int(raw["seed"])
        except (TypeError, ValueError):
            raise ScenarioError("seed must be an integer") from None
        return cls(fleet_path, tou, loads, eva, battery, net, cc, ts, bg, scheme, seed, raw)

    def effective_config(self) -> dict:
        """Fully resolved parameters, suitable for echoing next to run outputs."""
        market = {**asdict(self.eva), "e_limit_factor": self.trade.e_limit_factor,
                  "load_scale": self.trade.load_scale, "bootstrap_evs": self.trade.bootstrap_evs,
                  "beta": self.trade.beta, "discharge_offset": self.trade.discharge_offset}
        network = {**asdict(self.net), "nodes": self.trade.nodes, "faulty": self.trade.faulty,
                   "light_clients": self.trade.light_clients}
        cons = {**asdict(self.consensus), "slot_ms": self.trade.slot_ms, **asdict(self.bench)}
        return {"seed": self.seed, "scheme": self.scheme, "network": network,
                "consensus": cons, "market": market, "battery": asdict(self.battery),
                "files": {"fleet": str(self.fleet_path), **{
                    k: v for k, v in self.raw.get("files", {}).items() if k != "fleet"}}}


def _resolve(name: str, base_dir: Path) -> Path:
    p = Path(name)
    if not p.is_absolute():
        for root in (base_dir, DATA_DIR):
            if (root / p).exists():
                return root / p
        p = base_dir / p
    if not p.exists():
        raise ScenarioError(f"input file not found: {p}")
    return p


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ScenarioError(f"unknown {section} parameter(s): {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{section}: {e}") from None


SECTIONS = ("network", "consensus", "market", "battery", "files")


def _section_keys() -> dict[str, set]:
    keys = {
        "network": {f.name for f in fields(NetParams)} | {"nodes", "faulty", "light_clients"},
        "consensus": ({f.name for f in fields(ConsensusConfig)} | {"slot_ms"}
                      | {f.name for f in fields(BenchGrid)}),
        "market": {f.name for f in fields(EvaParams)} | {"e_limit_factor", "load_scale",
                                                         "bootstrap_evs", "beta",
                                                         "discharge_offset"},
        "battery": {f.name for f in fields(BatteryModel)},
        "files": {"fleet", "tou", "loads"},
    }
    return keys


def apply_override(raw: dict, item: str) -> dict:
    """Apply ``KEY=VALUE`` to a raw scenario dict in place.

    ``KEY`` is ``section.name`` or a bare parameter name that belongs to
    exactly one section; ``seed`` and ``scheme`` are top-level. ``VALUE`` is
    parsed as JSON when possible and kept as a string otherwise.
    """
    if "=" not in item:
        raise ScenarioError(f"override {item!r} is not KEY=VALUE")
    key, text = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if key in ("seed", "scheme"):
        raw[key] = value
        return raw
    known = _section_keys()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in known or name not in known[section]:
            raise ScenarioError(f"unknown parameter {key!r}")
    else:
        owners = [s for s, names in known.items() if key in names]
        if len(owners) != 1:
            raise ScenarioError(f"parameter {key!r} is unknown or ambiguous; use section.name")
        section, name = owners[0], key
    raw.setdefault(section, {})[name] = value
    return raw


# -- the trading loop --------------------------------------------------------

@dataclass
class Session:
    ev: EvProfile
    start: int   # absolute slot, inclusive
    end: int     # absolute slot, exclusive
    energy: float


@dataclass
class SlotRecord:
    outcome: SlotOutcome
    txs: list[Transaction]
    carried: int = 0


def make_settlement(ev_id: str, slot: int, x: float, p_c: float, p_d: float,
                    eva: EvaParams, scp: int, compensate_idle: bool = True) -> SettlementBody | None:
    """Settlement record for one EV decision (``None`` when nothing is owed)."""
    e0 = eva.e0
    if x > 0:
        energy = e0 * x
        mode, price, fee, comp = CHARGE_MODE, p_c, eva.w_service * energy, 0.0
    elif x < 0:
        energy = e0 * x
        mode, price, fee, comp = DISCHARGE_MODE, p_d, 0.0, 0.0
    else:
        if not compensate_idle:
            return None
        energy = 0.0
        mode, price, fee, comp = IDLE_MODE, eva.p_delay, 0.0, abs(eva.p_delay)
    payload = f"{ev_id}|{slot}|{mode}|{x!r}"
    return SettlementBody(ev_id, slot, mode, float(x), energy, price, price * energy, fee, comp,
                          ev_sig=sign(ev_id, payload), scp_sig=sign(scp, payload))


def settle_slot(slot: int, sessions: list[Session], entry: OracleEntry, eva: EvaParams,
                battery: BatteryModel, scheme: str = V2G,
                discharge_offset: float = LN2) -> tuple[SlotOutcome, list[tuple[Session, float]]]:
    """Market step for one slot: prices, decisions and post-trade energies.

    Mutates each session's ``energy`` and returns the outcome plus the
    ``(session, x)`` decisions in fleet order.
    """
    ids = [s.ev.ev_id for s in sessions]
    cap = np.array([s.ev.capacity for s in sessions], dtype=float)
    soc = np.array([s.energy for s in sessions], dtype=float) / np.where(cap > 0, cap, 1.0)
    soc = np.clip(soc, 0.0, 1.0)
    beta = np.array([s.ev.beta for s in sessions], dtype=float)
    fs = FleetSlice(ids, soc, cap, beta)
    clock = slot % SLOTS_PER_DAY
    if scheme == V2G:
        p_d = optimize_discharge_price(fs, entry.p_real_time, entry.e_limit, eva, battery,
                                       discharge_offset=discharge_offset)
        out = slot_revenue(p_d, fs, entry.p_real_time, entry.e_limit, eva, battery, clock,
                           discharge_offset)
    elif scheme == UC:
        out = uc_slot(fs, entry.p_real_time, eva, clock)
    else:
        raise ScenarioError(f"unknown scheme {scheme!r}")
    decisions = []
    for s, x in zip(sessions, out.x):
        x = float(x)
        s.energy = min(max(s.energy + eva.e0 * x, 0.0), s.ev.capacity)
        decisions.append((s, x))
    return out, decisions


REPORT_SCHEMA = 1


@dataclass
class DayReport:
    scheme: str
    seed: int
    n_evs: int
    total_charged_kwh: float
    total_discharged_kwh: float
    avg_charge_price: float
    avg_discharge_price: float
    r_total: float
    slots: list[dict]
    consensus: dict
    schedules: dict[str, dict[str, float]]
    settlements: int
    carried_settlements: int
    unfinalized_settlements: int
    chain_height: int
    ledger_matches_market: bool
    schema_version: int = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary(self) -> dict:
        return {"total_charged_kwh": self.total_charged_kwh,
                "total_discharged_kwh": self.total_discharged_kwh,
                "avg_charge_price": self.avg_charge_price,
                "avg_discharge_price": self.avg_discharge_price}


def ledger_totals(chain: Chain) -> dict:
    """Day-summary aggregates recomputed from finalized settlements only."""
    ch_e = ch_amt = dis_e = dis_amt = comp = fees = 0.0
    n = 0
    for block in chain.blocks:
        for tx in block.txs:
            if tx.kind != "settlement":
                continue
            b = tx.body
            n += 1
            if b.mode == CHARGE_MODE:
                ch_e += b.energy_kwh
                ch_amt += b.amount
                fees += b.service_fee
            elif b.mode == DISCHARGE_MODE:
                dis_e += b.energy_kwh
                dis_amt += b.amount
            else:
                comp += b.compensation
    return {
        "settlements": n,
        "charged_kwh": ch_e,
        "discharged_kwh": dis_e,
        "avg_charge_price": ch_amt / ch_e if ch_e > 0 else 0.0,
        # the EV is paid |amount| per |kWh|; reported as a non-positive price
        "avg_discharge_price": -dis_amt / -dis_e if dis_e < 0 else 0.0,
        "charge_payments": ch_amt,
        "discharge_payments": dis_amt,
        "service_fees": fees,
        "idle_compensation": comp,
    }


class TradeDay:
    """One scheme's trading day over the consensus simulator.

    Call :meth:`run` for the whole day, or drive :meth:`run_slot` yourself.
    """

    def __init__(self, scenario: Scenario, scheme: str, fleet: list[EvProfile] | None = None):
        if scheme not in SCHEMES:
            raise ScenarioError(f"unknown scheme {scheme!r}")
        self.sc = scenario
        self.scheme = scheme
        self.fleet = fleet if fleet is not None else scenario.fleet()
        self.feed = OracleFeed.build(scenario.tou, scenario.loads, scenario.eva,
                                     scenario.trade.e_limit_factor)
        self.horizon = 2 * SLOTS_PER_DAY
        self.report_start = SLOTS_PER_DAY
        self.sessions = [Session(ev, d * SLOTS_PER_DAY + ev.arrival,
                                 d * SLOTS_PER_DAY + ev.arrival + ev.session_length,
                                 ev.initial_energy)
                         for d in range(2) for ev in self.fleet]
        self.scp_of = {ev.ev_id: i % scenario.trade.nodes for i, ev in enumerate(self.fleet)}
        ts = scenario.trade
        self.slot_ms = ts.slot_ms
        bench = BenchConfig(nodes=ts.nodes, faulty=ts.faulty, duration_s=SLOTS_PER_DAY *
                            ts.slot_ms / 1000.0, tx_rate_per_node=0.0, seed=scenario.seed)
        self.sim = ConsensusSim(scenario.consensus, scenario.net, bench, txs=[])
        self.sim.start()
        self.wallets = {ev.ev_id: Wallet(ev.ev_id) for ev in self.fleet}
        self.clients = {ev.ev_id: LightClient(ev.ev_id) for ev in self.fleet} \
            if ts.light_clients else {}
        self.awaiting: list[Transaction] = []
        self.finalized_at: dict[str, float] = {}
        self.records: list[SlotRecord] = []
        self.schedules: dict[str, dict[str, float]] = {ev.ev_id: {} for ev in self.fleet}
        self.next_slot = 0

    # chain of the most advanced node; honest nodes never disagree on a height
    def chain(self) -> Chain:
        best = max(self.sim.states, key=lambda s: (s.chain.height, -s.id))
        return best.chain

    def plugged(self, slot: int) -> list[Session]:
        return [s for s in self.sessions if s.start <= slot < s.end]

    def run_slot(self, slot: int) -> SlotRecord:
        """All six contract steps for absolute ``slot``; slots must run in order."""
        if slot != self.next_slot:
            raise ScenarioError(f"slot {slot} run out of order (expected {self.next_slot})")
        self.next_slot += 1
        entry = self.feed[slot]
        sessions = self.plugged(slot)
        try:
            out, decisions = settle_slot(slot, sessions, entry, self.sc.eva, self.sc.battery,
                                         self.scheme, self.sc.trade.discharge_offset)
        except (MarketError, ValueError) as e:
            raise ScenarioError(f"slot {slot} ({slot_label(slot)}): {e}") from e
        rec = SlotRecord(out, [])
        if slot < self.report_start:
            return rec
        day_slot = slot - self.report_start
        t0 = day_slot * self.slot_ms
        txs, origins = [], []
        for s, x in decisions:
            self.schedules[s.ev.ev_id][str(day_slot)] = x
            body = make_settlement(s.ev.ev_id, day_slot, x, entry.p_real_time, out.p_d_star,
                                   self.sc.eva, self.scp_of[s.ev.ev_id],
                                   compensate_idle=self.scheme == V2G)
            if body is not None:
                txs.append(Transaction.settlement(body, t0, self.sc.net.tx_size))
                origins.append(self.scp_of[s.ev.ev_id])
        self.sim.submit(txs, origins)
        self.awaiting.extend(txs)
        rec.txs = txs
        self.sim.advance(t0 + self.slot_ms)
        rec.carried = self._absorb_finalized()
        self.records.append(rec)
        return rec

    def _absorb_finalized(self) -> int:
        """Apply newly finalized settlements to wallets; return how many are still waiting."""
        chain = self.chain()
        still = []
        conf = self.sim.trace.confirmed
        for tx in self.awaiting:
            if chain.contains_tx(tx.tx_id):
                wallet_apply(self.wallets[tx.body.ev_id], tx, chain)
                self.finalized_at[tx.tx_id] = conf.get(tx.tx_id, float("nan"))
            else:
                still.append(tx)
        self.awaiting = still
        if self.clients:
            sync_light_clients(self.clients, chain)
        return len(still)

    def run(self) -> DayReport:
        while self.next_slot < self.horizon:
            self.run_slot(self.next_slot)
        res = self.sim.finish()
        self._absorb_finalized()
        return self._report(res.metrics)

    def _report(self, metrics: ConsensusMetrics) -> DayReport:
        chain = self.chain()
        led = ledger_totals(chain)
        outs = [r.outcome for r in self.records]
        ch = sum(o.charged_kwh for o in outs)
        dis = sum(o.discharged_kwh for o in outs)
        matches = (not self.awaiting and abs(ch - led["charged_kwh"]) < 1e-6
                   and abs(dis + led["discharged_kwh"]) < 1e-6)
        slots = [o.row() for o in outs]
        return DayReport(
            scheme=self.scheme, seed=self.sc.seed, n_evs=len(self.fleet),
            total_charged_kwh=led["charged_kwh"], total_discharged_kwh=led["discharged_kwh"],
            avg_charge_price=led["avg_charge_price"],
            avg_discharge_price=led["avg_discharge_price"],
            r_total=float(sum(o.r_t for o in outs)), slots=slots,
            consensus=metrics.row(self.sc.consensus.protocol, self.sc.trade.nodes,
                                  self.sc.trade.faulty, self.sc.seed),
            schedules=self.schedules, settlements=led["settlements"],
            carried_settlements=sum(r.carried for r in self.records),
            unfinalized_settlements=len(self.awaiting), chain_height=chain.height,
            ledger_matches_market=matches)

    def write_outputs(self, report: DayReport, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "day_report.json").write_text(report.to_json() + "\n")
        write_slots_csv([r.outcome for r in self.records], out / "slots.csv")
        write_wallets_csv([self.wallets[ev.ev_id] for ev in self.fleet], out / "wallets.csv")
        write_chain_jsonl(self.chain(), out / "chain.jsonl")
        write_metrics_csv([report.consensus], out / "metrics.csv")
        return out


def run_day(scenario: Scenario, scheme: str | None = None,
            fleet: list[EvProfile] | None = None) -> DayReport:
    scheme = scheme or (scenario.scheme if scenario.scheme != "both" else V2G)
    return TradeDay(scenario, scheme, fleet).run()


def charge_price_reduction_pct(v2g: float, uc: float) -> float:
    if uc <= 0:
        raise ValueError("UC average charging price must be positive")
    return (1.0 - v2g / uc) * 100.0
