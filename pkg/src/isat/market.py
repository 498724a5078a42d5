"""EV side of the Stackelberg game: preferences, battery wear and best responses.

Scalar helpers take and return floats. The ``*_v`` variants accept numpy
arrays and are used by the aggregator when it sweeps many prices at once.

Sign conventions: ``x > 0`` charges, ``x < 0`` discharges; ``p_c > 0`` is the
price the EV pays per kWh and ``p_d <= 0`` means the EV is paid ``|p_d|``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CHARGE = "charge"
DISCHARGE = "discharge"
IDLE = "idle"

SOC_FLOOR = 0.01
LN2 = math.log(2.0)


class MarketError(ValueError):
    pass


@dataclass(frozen=True)
class EvProfile:
    """Static data for one vehicle.

    ``departure`` is a slot index in ``[0, 96)``; when ``next_day`` is set the
    session runs past midnight and ends at that slot of the following day.
    """
    ev_id: str
    capacity: float
    initial_energy: float
    arrival: int
    departure: int
    next_day: bool = False
    beta: float = 0.81

    def __post_init__(self):
        if self.capacity <= 0:
            raise MarketError(f"{self.ev_id}: capacity must be positive")
        if not 0 <= self.initial_energy <= self.capacity:
            raise MarketError(f"{self.ev_id}: initial energy {self.initial_energy} outside "
                              f"[0, {self.capacity}]")
        if self.beta <= 0:
            raise MarketError(f"{self.ev_id}: beta must be positive")
        if self.arrival == self.departure and not self.next_day:
            raise MarketError(f"{self.ev_id}: arrival equals departure")

    @property
    def session_length(self) -> int:
        end = self.departure + (96 if self.next_day else 0)
        return end - self.arrival

    def plugged_slots(self) -> list[int]:
        """Clock slots (0..95) the EV is plugged in, in session order."""
        return [(self.arrival + k) % 96 for k in range(self.session_length)]


@dataclass
class EvState:
    soc: float
    capacity: float
    plugged: bool = True
    slot: int = 0

    @property
    def energy(self) -> float:
        return self.soc * self.capacity

    def __post_init__(self):
        if not -1e-12 <= self.soc <= 1 + 1e-12:
            raise MarketError(f"soc {self.soc} outside [0, 1]")


@dataclass
class BatteryModel:
    """Cycle-life fit ``N = k0 * DoD^-k1 * exp(k2 (1 - DoD))`` and its wear cost."""
    kappa0: float = 1000.0
    kappa1: float = 0.5
    kappa2: float = 1.0
    capital_cost: float = 50000.0
    segments: int = 10

    def __post_init__(self):
        if self.kappa0 <= 0:
            raise MarketError("kappa0 must be positive")
        if self.segments < 2:
            raise MarketError("need at least 2 linearization segments")

    def cycle_life(self, dod: float) -> float:
        return cycle_life(dod, self)

    def one_cycle_cost(self, soc):
        """Wear cost ``C_cap / N(1 - soc)``; zero at a full battery (DoD -> 0)."""
        soc = np.asarray(soc, dtype=float)
        dod = 1.0 - soc
        with np.errstate(divide="ignore"):
            life = self.kappa0 * np.power(np.where(dod > 0, dod, 1.0), -self.kappa1) \
                * np.exp(self.kappa2 * (1.0 - dod))
        out = np.where(dod > 0, self.capital_cost / life, 0.0)
        return float(out) if out.ndim == 0 else out

    def breakpoints(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.segments + 1)

    def segment_slopes(self) -> np.ndarray:
        """|chord slope| of the one-cycle cost on each uniform SoC segment."""
        bp = self.breakpoints()
        c = self.one_cycle_cost(bp)
        return np.abs(np.diff(c)) / np.diff(bp)

    def linearized_cost(self, soc):
        """Piecewise-linear interpolant of :meth:`one_cycle_cost`."""
        bp = self.breakpoints()
        return np.interp(soc, bp, self.one_cycle_cost(bp))


def cycle_life(dod: float, model: BatteryModel) -> float:
    if dod <= 0 or dod > 1:
        raise MarketError(f"depth of discharge {dod} outside (0, 1]")
    return model.kappa0 * dod ** (-model.kappa1) * math.exp(model.kappa2 * (1.0 - dod))


def _segment_index(soc, segments: int):
    return np.clip(np.floor(np.asarray(soc, dtype=float) * segments).astype(int), 0, segments - 1)


def degradation_coefficient(soc_prev, capacity, model: BatteryModel, e0: float = 3.75):
    """Wear per unit of normalized trade, ``a``, for the SoC segment holding ``soc_prev``.

    Works elementwise on arrays. Always strictly positive.
    """
    slopes = model.segment_slopes()
    a = slopes[_segment_index(soc_prev, model.segments)] * e0 / np.asarray(capacity, dtype=float)
    return float(a) if np.ndim(a) == 0 else a


def willingness(beta, soc):
    """``w = beta / soc`` with SoC floored at 0.01."""
    s = np.maximum(np.asarray(soc, dtype=float), SOC_FLOOR)
    w = np.asarray(beta, dtype=float) / s
    return float(w) if w.ndim == 0 else w


def _check_x(x) -> None:
    if np.any(np.abs(np.asarray(x)) > 1 + 1e-12):
        raise MarketError("trade quantity outside [-1, 1]")


def satisfaction(w, x, discharge_offset: float = LN2):
    """Charging ``w ln(1+x)``; discharging ``w (ln(2+x) - offset)``.

    The default offset ``ln 2`` makes the two branches meet at ``x = 0``; pass
    ``1.0`` for the unshifted discharge curve.
    """
    _check_x(x)
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, w * np.log1p(np.maximum(x, 0.0)),
                   w * (np.log(2.0 + np.minimum(x, 0.0)) - discharge_offset))
    return float(out) if out.ndim == 0 else out


def utility(x, w, a, p_c, p_d, discharge_offset: float = LN2):
    x = np.asarray(x, dtype=float)
    s = satisfaction(w, x, discharge_offset)
    out = np.where(x >= 0, s - p_c * x, s - 2.0 * a * np.abs(x) + p_d * x)
    return float(out) if out.ndim == 0 else out


def critical_prices(w, a):
    """(CCP, CDP) = (w, -w/2 - 2a)."""
    return w, -w / 2.0 - 2.0 * a


@dataclass(frozen=True)
class Decision:
    mode: str
    x: float
    utility: float

    def __post_init__(self):
        if self.mode == CHARGE and not 0 < self.x <= 1 + 1e-12:
            raise MarketError(f"charge with x={self.x}")
        if self.mode == DISCHARGE and not -1 - 1e-12 <= self.x < 0:
            raise MarketError(f"discharge with x={self.x}")
        if self.mode == IDLE and self.x != 0:
            raise MarketError(f"idle with x={self.x}")


def charge_optimum(w, p_c, hi=1.0):
    return np.clip(w / p_c - 1.0, 0.0, hi)


def discharge_optimum(w, a, p_d, lo=-1.0):
    """Unconstrained discharge optimum clipped to ``[lo, 0]``.

    The closed form is ``-(2 + w/(p_d + 2a))``; when ``p_d + 2a >= 0`` the
    marginal gain of discharging is never positive and the optimum is 0.
    """
    den = np.asarray(p_d, dtype=float) + 2.0 * np.asarray(a, dtype=float)
    safe = np.where(den < 0, den, -1.0)
    x = np.where(den < 0, -(2.0 + w / safe), 0.0)
    return np.clip(x, lo, 0.0)


def best_response_v(w, a, p_c, p_d, lo=-1.0, hi=1.0, discharge_offset: float = LN2):
    """Vectorized decision rules; returns ``x`` (0 means idle).

    ``lo``/``hi`` are the SoC-feasible bounds on ``x`` (``lo <= 0 <= hi``).
    """
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=float)
    ccp, cdp = w, -w / 2.0 - 2.0 * a
    want_c = p_c < ccp
    want_d = p_d < cdp
    xc = np.where(want_c, charge_optimum(w, p_c, hi), 0.0)
    xd = np.where(want_d, discharge_optimum(w, a, p_d, lo), 0.0)
    both = want_c & want_d
    uc = utility(xc, w, a, p_c, p_d, discharge_offset)
    ud = utility(xd, w, a, p_c, p_d, discharge_offset)
    x = np.where(want_c & ~want_d, xc, 0.0)
    x = np.where(want_d & ~want_c, xd, x)
    x = np.where(both, np.where(uc >= ud, xc, xd), x)
    return x


def best_response(w: float, a: float, p_c: float, p_d: float, lo: float = -1.0, hi: float = 1.0,
                  mode: str = "rules", discharge_offset: float = LN2) -> Decision:
    """EV decision for one slot.

    ``mode="rules"`` applies the four threshold rules on CCP/CDP.
    ``mode="argmax"`` compares the utility of the idle point with each
    branch's constrained maximizer directly, without consulting thresholds.
    """
    if p_c <= 0 or p_d > 0:
        raise MarketError("need p_c > 0 >= p_d")
    if mode == "rules":
        x = float(best_response_v(w, a, p_c, p_d, lo, hi, discharge_offset))
    elif mode == "argmax":
        cands = [0.0]
        if hi > 0:
            cands.append(float(charge_optimum(w, p_c, hi)))
        if lo < 0:
            cands.append(float(discharge_optimum(w, a, p_d, lo)))
        x = max(cands, key=lambda c: (utility(c, w, a, p_c, p_d, discharge_offset), c > 0))
    else:
        raise MarketError(f"unknown mode {mode!r}")
    if abs(x) < 1e-15:
        return Decision(IDLE, 0.0, 0.0)
    u = utility(x, w, a, p_c, p_d, discharge_offset)
    return Decision(CHARGE if x > 0 else DISCHARGE, x, u)


def feasible_bounds(soc, capacity, e0: float = 3.75):
    """Bounds on ``x`` that keep SoC inside [0, 1] and ``|x| <= 1``."""
    soc = np.asarray(soc, dtype=float)
    cap = np.asarray(capacity, dtype=float)
    hi = np.clip((1.0 - soc) * cap / e0, 0.0, 1.0)
    lo = -np.clip(soc * cap / e0, 0.0, 1.0)
    return lo, hi


def apply_energy(state: EvState, x: float, e0: float = 3.75) -> tuple[EvState, float]:
    """Move ``E0*x`` kWh into the battery, clipping ``x`` to keep SoC in [0, 1].

    Returns the new state and the (possibly clipped) ``x``.
    """
    lo, hi = feasible_bounds(state.soc, state.capacity, e0)
    xc = float(min(max(x, float(lo)), float(hi)))
    soc = state.soc + e0 * xc / state.capacity
    soc = min(max(soc, 0.0), 1.0)
    return EvState(soc, state.capacity, state.plugged, state.slot + 1), xc
