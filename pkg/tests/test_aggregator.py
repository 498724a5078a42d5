import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isat.aggregator import (AggregatorError, EvaParams, FleetSlice, SlotInputs, auxiliary_revenue,
                             optimize_discharge_price, penalty, price_grid, revenue_curve,
                             service_revenue, slot_cost, slot_revenue, total_revenue, uc_baseline,
                             uc_slot)
from isat.market import BatteryModel, EvProfile
from isat.orchestrator import hhmm_to_slot

P = EvaParams()


def two_evs():
    return SlotInputs(["a", "b"], [0.9, 0.9], [0.1, 0.1], [-1, -1], [1, 1])


def test_slot_cost_examples():
    assert slot_cost([0, 0, 0], -0.5, P) == pytest.approx(0.3)
    assert slot_cost([-0.2, -0.2], -0.7, P) == pytest.approx(1.05)
    assert slot_cost([0.3, 1.0], -0.7, P) == 0.0


def test_penalty_examples():
    assert penalty(5.0, 6.0, 1.98) == 0.0
    assert penalty(5.0, 1.5, 3 * 0.66) == pytest.approx(6.93)
    assert penalty(0.0, 0.0, 5.0) == 0.0
    with pytest.raises(AggregatorError):
        penalty(-1.0, 0.0, 1.0)


@given(e=st.floats(0, 50), d1=st.floats(0, 50), d2=st.floats(0, 50), delta=st.floats(0, 10))
def test_penalty_non_increasing(e, d1, d2, delta):
    lo, hi = sorted((d1, d2))
    assert penalty(e, hi, delta) <= penalty(e, lo, delta)


def test_revenue_terms():
    assert auxiliary_revenue(1.5, 0.792) == pytest.approx(1.188)
    assert service_revenue([0.4], 0.5, 3.75) == pytest.approx(0.75)
    assert auxiliary_revenue(0.0, 0.792) == 0.0
    assert service_revenue([0.0, -0.3], 0.5, 3.75) == 0.0


def test_slot_revenue_two_ev_example():
    out = slot_revenue(-0.7, two_evs(), 1.12, 1.0, P)
    assert np.allclose(out.x, [-0.2, -0.2])
    assert out.r_t == pytest.approx(-1.05 + 1.188)
    assert out.r_t == pytest.approx(0.138)
    assert out.c_limit == 0.0


def test_slot_revenue_all_idle():
    inp = SlotInputs(["a", "b", "c"], [0.5, 0.6, 0.7], [0.1] * 3, [-1] * 3, [1] * 3)
    out = slot_revenue(0.0, inp, 1.12, 0.0, P)
    assert out.v_idle == ["a", "b", "c"]
    assert out.r_t == pytest.approx(-3 * 0.1)


def test_slot_revenue_rejects_price_outside_bounds():
    with pytest.raises(AggregatorError):
        slot_revenue(-5.0, two_evs(), 1.12, 0.0, P)
    with pytest.raises(AggregatorError):
        slot_revenue(0.1, two_evs(), 1.12, 0.0, P)


def random_inputs(rng, n):
    return SlotInputs([f"e{k}" for k in range(n)], rng.uniform(0.81, 8, n),
                      rng.uniform(0.01, 1.5, n), -rng.uniform(0, 1, n), rng.uniform(0, 1, n))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 30), p_rt=st.sampled_from([0.26, 0.66, 1.12]),
       e_limit=st.floats(0, 30))
def test_identity_and_partition(seed, n, p_rt, e_limit):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, n)
    p_d = float(rng.uniform(-3 * p_rt, 0))
    o = slot_revenue(p_d, inp, p_rt, e_limit, P)
    assert len(o.v_charge) + len(o.v_discharge) + len(o.v_idle) == n
    # re-add the four terms from scratch
    x = o.x
    dis = 3.75 * -x[x < 0].sum()
    chg = 3.75 * x[x > 0].sum()
    c_v2g = 0.1 * np.count_nonzero(x == 0) + abs(p_d) * dis
    c_lim = max(e_limit - dis, 0) * 3 * p_rt
    expect = -c_v2g - c_lim + 0.792 * dis + 0.5 * chg
    assert o.r_t == pytest.approx(expect, abs=1e-9)
    assert o.r_t == pytest.approx(-o.c_v2g - o.c_limit + o.r_grid + o.r_service, abs=1e-9)


def test_revenue_curve_matches_scalar_path():
    rng = np.random.default_rng(4)
    inp = random_inputs(rng, 12)
    grid = price_grid(-3.36, 0.0, 0.01)
    curve = revenue_curve(grid, inp, 1.12, 4.0, P)
    for k in (0, 50, 150, len(grid) - 1):
        assert curve[k] == pytest.approx(slot_revenue(grid[k], inp, 1.12, 4.0, P).r_t, abs=1e-9)


def test_price_grid_shape():
    g = price_grid(-1.98, 0.0, 0.01)
    assert len(g) == 199 and g[0] == 0.0 and g[-1] == pytest.approx(-1.98)
    assert list(price_grid(-0.5, -0.5, 0.01)) == [-0.5]


def test_optimizer_two_ev_dominance():
    inp = two_evs()
    p_star = optimize_discharge_price(inp, 0.66, 1.0, P)
    grid = price_grid(-1.98, 0.0, 0.01)
    r = revenue_curve(grid, inp, 0.66, 1.0, P)
    r_star = slot_revenue(p_star, inp, 0.66, 1.0, P).r_t
    assert np.all(r_star >= r - 1e-12)
    fine = price_grid(-1.98, 0.0, 0.001)
    rf = revenue_curve(fine, inp, 0.66, 1.0, P)
    k = int(np.argmax(rf))
    near = rf[max(0, k - 10):k + 11]
    assert rf.max() - r_star <= near.max() - near.min() + 1e-12


def test_optimizer_no_discharger_returns_p_d_max():
    inp = SlotInputs(["a"], [0.9], [5.0], [-1], [1])  # CDP = -10.45 < p_d_min
    assert optimize_discharge_price(inp, 0.66, 2.0, P) == 0.0
    single = EvaParams(p_d_min_factor=0.0)
    assert optimize_discharge_price(two_evs(), 0.66, 2.0, single) == 0.0


def test_optimizer_uses_battery_model_for_fleet_slices():
    fleet = FleetSlice(["a", "b"], np.array([0.6, 0.9]), np.array([40.0, 60.0]),
                       np.array([0.81, 0.81]))
    p = optimize_discharge_price(fleet, 1.12, 5.0, P, BatteryModel())
    assert -3.36 - 1e-9 <= p <= 0.0


def test_total_revenue():
    assert total_revenue([]) == 0
    a = slot_revenue(-0.7, two_evs(), 1.12, 1.0, P)
    b = slot_revenue(0.0, SlotInputs([], [], [], [], []), 1.12, 0.0, P)
    assert total_revenue([a, b]) == pytest.approx(0.138)


def test_uc_baseline_examples():
    full = EvProfile("f", 40, 40, 10, 20)
    ev = EvProfile("u", 24, 9.8, hhmm_to_slot("18:45"), hhmm_to_slot("04:30"), next_day=True)
    sched = uc_baseline([full, ev], np.zeros(96))
    assert all(v == 0 for v in sched["f"].values())
    charging = [v for v in sched["u"].values() if v > 0]
    assert len(charging) == 4
    assert charging[:3] == [3.75] * 3
    # 14.2 kWh deficit leaves 2.95 kWh for the fourth slot
    assert charging[3] == pytest.approx(14.2 - 3 * 3.75)
    assert sum(charging) == pytest.approx(14.2)


def test_uc_slot_never_discharges():
    fleet = FleetSlice(["a", "b"], np.array([0.2, 1.0]), np.array([40.0, 40.0]),
                       np.array([0.81, 0.81]))
    o = uc_slot(fleet, 0.26, P)
    assert o.discharged_kwh == 0 and o.v_charge == ["a"] and o.v_idle == ["b"]
    assert o.r_t == pytest.approx(0.5 * 3.75)


def test_decision_price_includes_service_fee():
    inp = SlotInputs(["a"], [0.9], [0.1], [-1], [1])  # CCP 0.9
    assert P.charge_price(0.66) == pytest.approx(1.16)
    assert slot_revenue(0.0, inp, 0.66, 0.0, P).v_idle == ["a"]
    bare = EvaParams(fee_in_decision_price=False)
    out = slot_revenue(0.0, inp, 0.66, 0.0, bare)
    assert out.v_charge == ["a"] and out.x[0] == pytest.approx(0.9 / 0.66 - 1)


def test_params_validation():
    with pytest.raises(AggregatorError):
        EvaParams(p_d_max=0.5).validate()
    with pytest.raises(AggregatorError):
        EvaParams(grid_step=0).validate()
