import dataclasses
import random
from collections import defaultdict

import pytest
from hypothesis import given, settings, strategies as st

from tfdma import engine
from tfdma.desync import DesyncChannel, DesyncParams, InvalidInput
from tfdma.engine import NotAtSteadyState, SimConfig, Simulator, airtime_shares, is_balanced
from tfdma.protocol import ProtocolParams

T = 0.25


def cfg(W=16, C=8, seed=1, **kw):
    proto_kw = {k: kw.pop(k) for k in list(kw) if k in {f.name for f in dataclasses.fields(ProtocolParams)}}
    return SimConfig(protocol=ProtocolParams(n_channels_C=C, **proto_kw), n_nodes_W_tot=W, seed=seed, **kw)


def test_same_seed_same_trace():
    a, sa = engine.run(cfg(seed=5))
    b, sb = engine.run(cfg(seed=5))
    assert a.to_csv() == b.to_csv() and sa.to_json() == sb.to_json()


def test_different_seed_different_trace():
    assert engine.run(cfg(seed=5))[0].to_csv() != engine.run(cfg(seed=6))[0].to_csv()


@given(seed=st.integers(0, 2**32 - 1), C=st.integers(1, 6), W=st.integers(1, 20))
@settings(max_examples=25, deadline=None)
def test_node_count_is_conserved(seed, C, W):
    trace, summary = engine.run(cfg(W=W, C=C, seed=seed, max_time=5.0))
    assert all(sum(occ) == W for _, occ in trace.occupancy_history)
    assert sum(summary.final_occupancy) == W


def test_converged_runs_are_balanced():
    for seed in range(30):
        _, s = engine.run(cfg(seed=seed))
        if s.converged:
            assert is_balanced(s.final_occupancy, 16)


def test_single_channel_matches_desync_core():
    phases = [random.Random(3).uniform(0, T) for _ in range(12)]
    trace, _ = engine.run(
        cfg(W=12, C=1, initial_phases=tuple(phases), max_time=6.0, stop_on_convergence=False)
    )
    ch = DesyncChannel(phases, DesyncParams())
    ch.run_rounds(24)
    fires = defaultdict(list)
    for r in trace.of_kind("FIRE_BEACON"):
        fires[r.node_id].append(r.timestamp)
    for i, s in enumerate(ch.schedules):
        n = min(len(fires[i]), len(s.fire_times))
        assert n >= 20
        assert fires[i][:n] == s.fire_times[:n]


def test_single_channel_has_no_switching():
    _, s = engine.run(cfg(C=1))
    assert s.switch_attempts == 0 and s.returns == 0 and s.converged


def test_short_run_does_not_converge():
    _, s = engine.run(cfg(max_time=0.1))
    assert not s.converged and s.convergence_time is None


def test_loss_fraction():
    sim = Simulator(cfg(seed=2, message_loss_prob=0.2, max_time=60.0, stop_on_convergence=False))
    trace, _ = sim.run()
    assert sim.messages_sent > 4000
    assert abs(sim.messages_dropped / sim.messages_sent - 0.2) <= 0.02
    assert len(trace.of_kind("DROPPED_MSG")) == sim.messages_dropped


def test_at_most_one_switch_per_channel_per_period():
    for seed in range(10):
        trace, _ = engine.run(cfg(seed=seed))
        by_channel = defaultdict(list)
        for r in trace.of_kind("SEND_SWITCH"):
            by_channel[r.channel].append(r.timestamp)
        for times in by_channel.values():
            assert all(b - a >= T - 1e-9 for a, b in zip(times, times[1:]))


def test_returning_node_keeps_its_slot():
    q = DesyncParams().q_ss
    for seed in range(5):
        trace, _ = engine.run(cfg(seed=seed))
        last_beacon, left = {}, {}
        for r in trace.records:
            if r.event_kind == "FIRE_BEACON":
                last_beacon[r.node_id] = r.timestamp
            elif r.event_kind == "SEND_SWITCH":
                left[r.node_id] = last_beacon[r.node_id]
            elif r.event_kind == "SEND_RETURN":
                back = last_beacon[r.node_id]
                k = round((back - left[r.node_id]) / T)
                assert k >= 1 and abs(back - left[r.node_id] - k * T) < q * T


def test_heard_count_matches_occupancy_at_steady_state():
    sim = Simulator(cfg(seed=4, settle_time=2.0))
    _, s = sim.run()
    assert s.converged
    occ = sim.occupancy()
    for node in sim.nodes.values():
        assert node.w_heard == occ[node.channel - 1]


def test_forced_attempts_keep_coming():
    Z = 5
    trace, _ = engine.run(
        cfg(W=4, C=2, seed=1, p_sw_initial=1e-9, Z=Z, initial_assignment=(2, 2), max_time=20.0, stop_on_convergence=False)
    )
    by_channel = defaultdict(list)
    for r in trace.of_kind("SEND_SWITCH"):
        by_channel[r.channel].append(r.timestamp)
    for c in (1, 2):
        times = [0.0] + by_channel[c] + [20.0]
        assert len(times) > 4
        assert max(b - a for a, b in zip(times, times[1:])) <= (Z + 2) * T + 1e-9


def test_airtime_shares_at_balance():
    trace, s = engine.run(cfg(seed=3, settle_time=5.0))
    assert s.converged
    start = s.convergence_time
    shares = airtime_shares(trace, (start, start + 5.0))
    assert len(shares) == 16
    assert all(abs(v - 8 / 16) < 0.05 for v in shares.values())
    assert s.per_node_airtime_share and abs(sum(s.per_node_airtime_share) - 8) < 0.05


def test_shares_sum_to_one_per_channel():
    trace, s = engine.run(cfg(W=12, C=3, seed=8, settle_time=5.0))
    assert s.converged
    nodes_by_channel = defaultdict(set)
    for r in trace.of_kind("FIRE_BEACON"):
        if r.timestamp >= s.convergence_time:
            nodes_by_channel[r.channel].add(r.node_id)
    shares = airtime_shares(trace, (s.convergence_time, s.convergence_time + 5.0))
    for members in nodes_by_channel.values():
        assert sum(shares[n] for n in members) == pytest.approx(1.0, abs=0.02)


def test_shares_refused_before_convergence():
    trace, s = engine.run(cfg(seed=3))
    with pytest.raises(NotAtSteadyState):
        airtime_shares(trace, (0.0, 1.0))


def test_departure_is_healed():
    events = (engine.MembershipEvent(20.0, "depart", 0), engine.MembershipEvent(20.0, "depart", 1))
    trace, _ = engine.run(cfg(seed=2, max_time=60.0, stop_on_convergence=False, membership_events=events))
    assert len(trace.of_kind("DEPART")) == 2
    assert all(sum(occ) == 14 for t, occ in trace.occupancy_history if t > 20.0)


def test_trace_csv_format():
    trace, _ = engine.run(cfg(seed=1, max_time=1.0))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "time_s,channel,node,event,detail"
    assert {r.event_kind for r in trace.records} <= set(engine.EVENT_KINDS)
    assert len(trace.to_jsonl().splitlines()) == len(lines) - 1


@pytest.mark.parametrize(
    "kw",
    [dict(W=0), dict(message_loss_prob=1.0), dict(propagation_delay=0.01), dict(initial_assignment=(1, 1))],
)
def test_config_validated(kw):
    with pytest.raises(InvalidInput):
        cfg(**kw)


def test_replications_are_reproducible():
    a = engine.convergence_time_distribution(cfg(W=8, C=2), 10)
    b = engine.convergence_time_distribution(cfg(W=8, C=2), 10)
    assert a.samples == b.samples and a.n_runs == 10
    assert a.n_converged + a.n_nonconverged == 10
