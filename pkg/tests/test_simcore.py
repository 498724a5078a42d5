import random
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from isat.simcore import (DELIVER, TIMER, ConfigurationError, Engine, MessageEnvelope, NetNode,
                          NetParams, Network, SimulationError, build_topology,
                          gossip_disseminate, message_delay, poisson_tx_arrivals,
                          propagation_ms, sample_bandwidth, transmission_ms)


def _pair(dist, bw_a=5.0, bw_b=5.0):
    return NetNode(0, (0.0, 0.0), bw_a), NetNode(1, (dist, 0.0), bw_b)


def _msg(size):
    return MessageEnvelope("m", 0, 1, size, "PREPARE")


def test_delay_fixed_parts_only():
    a, b = _pair(0.0)
    assert message_delay(_msg(0.0), a, b, NetParams()) == pytest.approx(0.02)


def test_delay_hand_example():
    a, b = _pair(1000.0)
    assert message_delay(_msg(0.002), a, b, NetParams()) == pytest.approx(0.425)


def test_doubling_size_doubles_transmission_only():
    a, b = _pair(1000.0)
    p = NetParams()
    d1 = message_delay(_msg(0.002), a, b, p)
    d2 = message_delay(_msg(0.004), a, b, p)
    assert d2 - d1 == pytest.approx(transmission_ms(0.002, a, b))


@given(dist=st.floats(0, 3000), size=st.floats(0, 1), bw_a=st.floats(0.1, 10),
       bw_b=st.floats(0.1, 10), proc=st.floats(0, 1), queue=st.floats(0, 1))
def test_delay_is_sum_of_components(dist, size, bw_a, bw_b, proc, queue):
    a, b = _pair(dist, bw_a, bw_b)
    p = NetParams(processing_delay_ms=proc, queuing_delay_ms=queue)
    parts = dist / 2e8 * 1000 + size / min(bw_a, bw_b) * 1000 + proc + queue
    assert message_delay(_msg(size), a, b, p) == pytest.approx(parts, rel=1e-12, abs=1e-15)
    assert propagation_ms(a, b, p) == pytest.approx(dist / 2e5)


def test_bandwidth_degenerate_and_statistics():
    assert sample_bandwidth(NetParams(bandwidth_sd=0.0), random.Random(3)) == 5.0
    rng = random.Random(11)
    draws = [sample_bandwidth(NetParams(), rng) for _ in range(10_000)]
    assert abs(statistics.fmean(draws) - 5.0) <= 0.05
    assert abs(statistics.stdev(draws) - 0.5) <= 0.05


def test_bandwidth_same_seed_same_sequence():
    r1, r2 = random.Random(5), random.Random(5)
    assert [sample_bandwidth(NetParams(), r1) for _ in range(20)] == \
        [sample_bandwidth(NetParams(), r2) for _ in range(20)]


def test_poisson_counts():
    assert poisson_tx_arrivals(0.0, 600, random.Random(0)) == []
    for seed in range(20):
        n = len(poisson_tx_arrivals(1.0, 600, random.Random(seed)))
        assert 525 <= n <= 675
    assert poisson_tx_arrivals(1.0, 60, random.Random(9)) == poisson_tx_arrivals(1.0, 60, random.Random(9))


def test_poisson_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        poisson_tx_arrivals(-1, 10, random.Random(0))
    with pytest.raises(ConfigurationError):
        poisson_tx_arrivals(1, 0, random.Random(0))


def _ring(n):
    nodes = [NetNode(i, (float(i), 0.0), 5.0, frozenset({(i - 1) % n, (i + 1) % n}))
             for i in range(n)]
    return Network(nodes, NetParams())


def test_gossip_single_node():
    net = Network([NetNode(0, (0.0, 0.0), 5.0)], NetParams())
    s = gossip_disseminate(0, _msg(0.002), net, 2, random.Random(0))
    assert s.holders == {0}
    assert s.forwarded == 0


def test_gossip_ring_of_four():
    s = gossip_disseminate(0, _msg(0.002), _ring(4), 2, random.Random(0))
    assert s.holders == {0, 1, 2, 3}
    accepted = [d.receiver for d in s.deliveries if d.accepted]
    assert sorted(accepted) == [1, 2, 3]


def test_gossip_down_receiver_discarded():
    s = gossip_disseminate(0, _msg(0.002), _ring(4), 2, random.Random(0),
                           is_up=lambda node, t: node != 2)
    assert 2 not in s.holders
    assert any(d.receiver == 2 and d.reason == "down" for d in s.deliveries)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(9, 30), fanout=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_gossip_termination_bounds(n, fanout, seed):
    net = Network.build(n, NetParams(gossip_fanout=fanout), random.Random(seed))
    s = gossip_disseminate(0, _msg(0.002), net, fanout, random.Random(seed))
    assert s.forwarded <= n * fanout
    accepted = [d.receiver for d in s.deliveries if d.accepted]
    assert len(accepted) == len(set(accepted))


def test_topology_is_regular_and_connected():
    g = build_topology(15, 8, seed=4)
    assert all(d == 8 for _, d in g.degree())
    net = Network.build(15, NetParams(), random.Random(4))
    assert net.is_connected()


def test_engine_empty_queue():
    eng = Engine()
    assert eng.run_until(100.0) == []
    assert eng.now == 0.0


def test_engine_same_fire_at_in_insertion_order():
    eng = Engine()
    seen = []
    eng.on(TIMER, lambda e, t, node, payload: seen.append(payload))
    for k in range(5):
        eng.schedule(10.0, TIMER, 0, k)
    eng.run_until(10.0)
    assert seen == [0, 1, 2, 3, 4]


def test_engine_rejects_past_events():
    eng = Engine()
    eng.on(TIMER, lambda *a: None)
    eng.schedule(5.0, TIMER)
    eng.run_until(5.0)
    with pytest.raises(SimulationError):
        eng.schedule(4.0, TIMER)


@given(times=st.lists(st.floats(0, 1000), min_size=1, max_size=50))
def test_engine_clock_monotone(times):
    eng = Engine(record_trace=True)
    stamps = []

    def handler(e, t, node, payload):
        stamps.append(t)
        if payload < 3:
            e.schedule(t + 1.0, DELIVER, node, payload + 1)

    eng.on(DELIVER, handler)
    for t in times:
        eng.schedule(t, DELIVER, 0, 0)
    eng.run_until(2000.0)
    assert stamps == sorted(stamps)
    assert [r.time_ms for r in eng.trace] == stamps


def test_engine_trace_deterministic():
    def run(seed):
        rng = random.Random(seed)
        eng = Engine(record_trace=True)
        eng.on(DELIVER, lambda e, t, node, p: None)
        for _ in range(100):
            eng.schedule(rng.uniform(0, 50), DELIVER, rng.randrange(4), None)
        return eng.run_until(100.0)

    assert run(3) == run(3)


def test_netparams_validation():
    with pytest.raises(ConfigurationError):
        NetParams(gossip_fanout=0).validate()
    with pytest.raises(ConfigurationError):
        NetParams(bandwidth_mean=0).validate()
