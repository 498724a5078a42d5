"""EV aggregator (EVA): slot revenue, discharge-price choice and the UC baseline."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .market import (BatteryModel, best_response_v, degradation_coefficient, feasible_bounds,
                     willingness, LN2)

SLOT_COLUMNS = ("slot", "p_real_time", "p_d_star", "charged_kwh", "discharged_kwh", "C_V2G",
                "C_limit", "R_grid_V2G", "R_service", "R_t")


class AggregatorError(ValueError):
    pass


@dataclass
class EvaParams:
    w_grid: float = 0.792
    w_service: float = 0.5
    e0: float = 3.75
    delta_factor: float = 3.0
    p_delay: float = -0.1
    p_d_min_factor: float = 3.0
    p_d_max: float = 0.0
    grid_step: float = 0.01
    # EVs weigh the full per-kWh bill (real-time price plus service fee) when deciding to charge
    fee_in_decision_price: bool = True

    def validate(self) -> None:
        if self.w_service <= 0 or self.e0 <= 0:
            raise AggregatorError("w_service and e0 must be positive")
        if self.w_grid < 0:
            raise AggregatorError("w_grid must be non-negative")
        if self.p_d_max > 0:
            raise AggregatorError("p_d_max must be <= 0")
        if self.grid_step <= 0:
            raise AggregatorError("grid_step must be positive")

    def p_d_min(self, p_rt: float) -> float:
        return -self.p_d_min_factor * p_rt

    def delta(self, p_rt: float) -> float:
        return self.delta_factor * abs(p_rt)

    def charge_price(self, p_rt: float) -> float:
        """Per-kWh price an EV compares against its CCP."""
        return p_rt + self.w_service if self.fee_in_decision_price else p_rt


@dataclass
class FleetSlice:
    """Plugged EVs at one slot, as parallel arrays."""
    ev_ids: list
    soc: np.ndarray
    capacity: np.ndarray
    beta: np.ndarray

    def __len__(self) -> int:
        return len(self.ev_ids)


@dataclass
class SlotOutcome:
    slot: int
    p_real_time: float
    p_d_star: float
    x: np.ndarray = field(repr=False)
    v_charge: list = field(default_factory=list)
    v_discharge: list = field(default_factory=list)
    v_idle: list = field(default_factory=list)
    charged_kwh: float = 0.0
    discharged_kwh: float = 0.0
    c_v2g: float = 0.0
    c_limit: float = 0.0
    r_grid: float = 0.0
    r_service: float = 0.0
    r_t: float = 0.0
    e_limit: float = 0.0

    def row(self) -> dict:
        return {"slot": self.slot, "p_real_time": self.p_real_time, "p_d_star": self.p_d_star,
                "charged_kwh": self.charged_kwh, "discharged_kwh": self.discharged_kwh,
                "C_V2G": self.c_v2g, "C_limit": self.c_limit, "R_grid_V2G": self.r_grid,
                "R_service": self.r_service, "R_t": self.r_t}


def slot_cost(xs, p_d: float, params: EvaParams) -> float:
    """Idle compensation plus payments to discharging EVs (charging nets out)."""
    xs = np.asarray(xs, dtype=float)
    n_idle = int(np.count_nonzero(xs == 0))
    discharged = params.e0 * float(-xs[xs < 0].sum())
    return n_idle * abs(params.p_delay) + abs(p_d) * discharged


def penalty(e_limit: float, discharged_kwh: float, delta_magnitude: float) -> float:
    if e_limit < 0:
        raise AggregatorError("E_limit must be >= 0")
    short = e_limit - discharged_kwh
    return short * abs(delta_magnitude) if short > 0 else 0.0


def auxiliary_revenue(discharged_kwh: float, w_grid: float) -> float:
    return w_grid * discharged_kwh


def service_revenue(xs, w_service: float, e0: float) -> float:
    xs = np.asarray(xs, dtype=float)
    return w_service * e0 * float(xs[xs > 0].sum())


@dataclass
class SlotInputs:
    """Per-EV response coefficients for one slot: ``w``, ``a`` and x bounds."""
    ev_ids: list
    w: np.ndarray
    a: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.w, self.a, self.lo, self.hi = (np.atleast_1d(np.asarray(v, dtype=float))
                                            for v in (self.w, self.a, self.lo, self.hi))
        if not len(self.ev_ids) == len(self.w) == len(self.a) == len(self.lo) == len(self.hi):
            raise AggregatorError("slot input arrays differ in length")

    def __len__(self) -> int:
        return len(self.ev_ids)


def fleet_coefficients(fleet: FleetSlice, battery: BatteryModel, e0: float) -> SlotInputs:
    w = willingness(fleet.beta, fleet.soc)
    a = degradation_coefficient(fleet.soc, fleet.capacity, battery, e0)
    lo, hi = feasible_bounds(fleet.soc, fleet.capacity, e0)
    return SlotInputs(list(fleet.ev_ids), w, a, lo, hi)


def _as_inputs(fleet, battery, e0) -> SlotInputs:
    if isinstance(fleet, SlotInputs):
        return fleet
    if len(fleet) == 0:
        return SlotInputs([], [], [], [], [])
    return fleet_coefficients(fleet, battery, e0)


def _outcome(slot: int, p_rt: float, p_d: float, xs: np.ndarray, fleet,
             e_limit: float, params: EvaParams) -> SlotOutcome:
    e0 = params.e0
    charged = e0 * float(xs[xs > 0].sum())
    discharged = e0 * float(-xs[xs < 0].sum())
    c_v2g = slot_cost(xs, p_d, params)
    c_lim = penalty(e_limit, discharged, params.delta(p_rt))
    r_grid = auxiliary_revenue(discharged, params.w_grid)
    r_srv = service_revenue(xs, params.w_service, e0)
    ids = fleet.ev_ids
    return SlotOutcome(
        slot=slot, p_real_time=p_rt, p_d_star=p_d, x=xs,
        v_charge=[ids[i] for i in np.flatnonzero(xs > 0)],
        v_discharge=[ids[i] for i in np.flatnonzero(xs < 0)],
        v_idle=[ids[i] for i in np.flatnonzero(xs == 0)],
        charged_kwh=charged, discharged_kwh=discharged, c_v2g=c_v2g, c_limit=c_lim,
        r_grid=r_grid, r_service=r_srv, r_t=-c_v2g - c_lim + r_grid + r_srv, e_limit=e_limit)


def slot_revenue(p_d: float, fleet, p_rt: float, e_limit: float, params: EvaParams,
                 battery: BatteryModel | None = None, slot: int = 0,
                 discharge_offset: float = LN2) -> SlotOutcome:
    """EV responses to ``(p_rt, p_d)`` and the EVA's resulting slot revenue.

    EVs see the charging price :meth:`EvaParams.charge_price`; the EVA's own
    accounting (penalty scale, discharge floor) keys off ``p_rt``.

    Args:
        fleet: a :class:`FleetSlice` (coefficients derived from SoC) or a
            ready :class:`SlotInputs`.
    """
    lo_p = params.p_d_min(p_rt)
    if not lo_p - 1e-9 <= p_d <= params.p_d_max + 1e-9:
        raise AggregatorError(f"p_d {p_d} outside [{lo_p}, {params.p_d_max}]")
    inp = _as_inputs(fleet, battery, params.e0)
    if len(inp) == 0:
        return _outcome(slot, p_rt, p_d, np.zeros(0), inp, e_limit, params)
    xs = best_response_v(inp.w, inp.a, params.charge_price(p_rt), p_d, inp.lo, inp.hi,
                         discharge_offset)
    xs = np.where(np.abs(xs) < 1e-15, 0.0, xs)
    return _outcome(slot, p_rt, p_d, xs, inp, e_limit, params)


def price_grid(p_min: float, p_max: float, step: float) -> np.ndarray:
    """Grid from ``p_max`` down to ``p_min`` (inclusive) at ``step``."""
    if p_min > p_max + 1e-12:
        raise AggregatorError("p_d_min above p_d_max")
    k = int(np.floor((p_max - p_min) / step + 1e-9))
    g = p_max - step * np.arange(k + 1)
    if g[-1] - p_min > 1e-9:
        g = np.append(g, p_min)
    return g


def revenue_curve(grid: np.ndarray, fleet, p_rt: float, e_limit: float,
                  params: EvaParams, battery: BatteryModel | None = None,
                  discharge_offset: float = LN2) -> np.ndarray:
    """R_t at every price in ``grid`` (vectorized over prices and EVs)."""
    n_idle_pay = abs(params.p_delay)
    e0 = params.e0
    grid = np.asarray(grid, dtype=float)
    inp = _as_inputs(fleet, battery, e0)
    if len(inp) == 0:
        return np.full(len(grid), -penalty(e_limit, 0.0, params.delta(p_rt)))
    P = grid[:, None]
    xs = best_response_v(inp.w[None, :], inp.a[None, :], params.charge_price(p_rt), P,
                         inp.lo[None, :], inp.hi[None, :], discharge_offset)
    xs = np.where(np.abs(xs) < 1e-15, 0.0, xs)
    charged = e0 * np.where(xs > 0, xs, 0.0).sum(axis=1)
    discharged = e0 * np.where(xs < 0, -xs, 0.0).sum(axis=1)
    idle = (xs == 0).sum(axis=1)
    c_v2g = idle * n_idle_pay + np.abs(grid) * discharged
    c_lim = np.maximum(e_limit - discharged, 0.0) * params.delta(p_rt)
    return -c_v2g - c_lim + params.w_grid * discharged + params.w_service * charged


def optimize_discharge_price(fleet, p_rt: float, e_limit: float, params: EvaParams,
                             battery: BatteryModel | None = None, step: float | None = None,
                             discharge_offset: float = LN2) -> float:
    """Exhaustive grid search for the revenue-maximizing discharge price.

    Ties go to the price nearest zero, which is the first grid entry.
    """
    grid = price_grid(params.p_d_min(p_rt), params.p_d_max, step or params.grid_step)
    if len(fleet) == 0:
        return float(params.p_d_max)
    r = revenue_curve(grid, fleet, p_rt, e_limit, params, battery, discharge_offset)
    best = r.max()
    idx = int(np.flatnonzero(r >= best - 1e-12)[0])
    return float(grid[idx])


def total_revenue(outcomes) -> float:
    return float(sum(o.r_t for o in outcomes))


def uc_slot(fleet: FleetSlice, p_rt: float, params: EvaParams, slot: int = 0) -> SlotOutcome:
    """Uncoordinated charging: every plugged EV takes the largest feasible charge.

    The EVA sells no auxiliary service under UC, so no penalty or idle
    compensation is booked.
    """
    if len(fleet) == 0:
        xs = np.zeros(0)
    else:
        _, hi = feasible_bounds(fleet.soc, fleet.capacity, params.e0)
        xs = np.atleast_1d(hi).astype(float)
    e0 = params.e0
    charged = e0 * float(xs.sum())
    r_srv = service_revenue(xs, params.w_service, e0)
    ids = fleet.ev_ids
    return SlotOutcome(slot=slot, p_real_time=p_rt, p_d_star=0.0, x=xs,
                       v_charge=[ids[i] for i in np.flatnonzero(xs > 0)],
                       v_idle=[ids[i] for i in np.flatnonzero(xs == 0)],
                       charged_kwh=charged, r_service=r_srv, r_t=r_srv)


def uc_baseline(fleet, prices, e0: float = 3.75) -> dict:
    """Per-EV charging schedule (slot -> kWh) when every EV charges flat out.

    ``fleet`` is a sequence of :class:`~isat.market.EvProfile`; ``prices`` is
    only used for its length (UC ignores prices).
    """
    horizon = len(prices)
    out = {}
    for ev in fleet:
        energy = ev.initial_energy
        sched = {}
        for s in ev.plugged_slots():
            if s >= horizon:
                continue
            take = min(e0, ev.capacity - energy)
            if take <= 1e-12:
                take = 0.0
            sched[s] = take
            energy += take
        out[ev.ev_id] = sched
    return out


def write_slots_csv(outcomes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(SLOT_COLUMNS))
        w.writeheader()
        for o in outcomes:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in o.row().items()})
