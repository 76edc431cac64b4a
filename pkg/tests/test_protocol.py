import random

import pytest
from hypothesis import given, strategies as st

from tfdma import protocol as proto
from tfdma.desync import InvalidInput
from tfdma.protocol import (
    Beacon,
    ChannelLocalView,
    NodeMode,
    NoTargetChannel,
    ProtocolParams,
    Return,
    Switch,
    decide_switch_attempt,
    evaluate_join,
    max_offset,
    target_channel,
    update_direction,
    update_switch_probability,
)

PP = ProtocolParams()
T = PP.T


def view(p_sw=0.33, since=0):
    return ChannelLocalView(1, 4, False, p_sw, 1, since)


def test_forced_attempt_dominates():
    assert decide_switch_attempt(view(p_sw=1e-12, since=PP.Z), PP, random.Random(0))


def test_attempt_rate_matches_probability():
    rng = random.Random(42)
    hits = sum(decide_switch_attempt(view(), PP, rng) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.33) <= 0.02


@pytest.mark.parametrize("cur,s,C,want", [(8, 1, 8, 1), (1, -1, 8, 8), (3, 2, 8, 5), (1, 1, 2, 2), (2, -1, 2, 1)])
def test_target_channel(cur, s, C, want):
    assert target_channel(cur, s, C) == want


def test_target_channel_errors():
    with pytest.raises(NoTargetChannel):
        target_channel(1, 1, 1)
    with pytest.raises(InvalidInput):
        target_channel(1, 5, 8)
    with pytest.raises(InvalidInput):
        target_channel(9, 1, 8)


@pytest.mark.parametrize("wo,wt,want", [(4, 2, True), (4, 3, False), (2, 0, True), (3, 3, False)])
def test_evaluate_join(wo, wt, want):
    assert evaluate_join(wo, wt) is want


def test_probability_update_examples():
    assert update_switch_probability(0.33, False, 1.25) == pytest.approx(0.4125)
    assert update_switch_probability(0.9, False, 1.25) == 1.0
    assert update_switch_probability(0.4125, True, 1.25) == pytest.approx(0.33)


@given(p=st.floats(1e-6, 0.79), beta=st.floats(1.01, 1.25))
def test_success_then_failure_restores_probability(p, beta):
    up = update_switch_probability(p, False, beta)
    assert update_switch_probability(up, True, beta) == pytest.approx(p, rel=1e-12)


def test_direction_examples():
    assert update_direction(1, True, 8, fail_streak=1) == -1
    assert update_direction(-1, True, 8, fail_streak=2) == 2
    assert update_direction(-3, False, 8) == 1


def test_direction_two_channels_stays_on_other_channel():
    s = 1
    for streak in range(1, 6):
        s = update_direction(s, True, 2, streak)
        assert target_channel(1, s, 2) == 2


@pytest.mark.parametrize("C", range(2, 17))
def test_repeated_failures_visit_every_channel(C):
    for start in range(1, C + 1):
        s, seen = 1, set()
        for streak in range(1, 2 * C + 2):
            seen.add(target_channel(start, s, C))
            s = update_direction(s, True, C, streak)
            assert 1 <= abs(s) <= max_offset(C)
        assert seen == set(range(1, C + 1)) - {start}


@pytest.mark.parametrize("kw", [dict(beta=1.0), dict(p_sw_initial=0.0), dict(p_sw_initial=1.5), dict(Z=0), dict(s_initial=5)])
def test_params_validated(kw):
    with pytest.raises(InvalidInput):
        ProtocolParams(**kw)


def frozen_node(params=PP):
    st = proto.new_node(0, 1, 0.0, params)
    proto.fire(st, 0.0, params, random.Random(1))
    proto.on_message(st, Switch(1, channel=1, timestamp=0.05), params)
    assert st.mode is NodeMode.FROZEN
    return st


def test_return_ends_switch_mode_as_failure():
    st = frozen_node()
    proto.on_message(st, Return(1, channel=1, timestamp=0.3), PP)
    assert st.mode is NodeMode.DESYNC_ACTIVE
    assert st.p_sw == pytest.approx(PP.p_sw_initial / PP.beta)
    assert st.s_offset == -PP.s_initial


def test_silence_ends_switch_mode_as_success():
    st = frozen_node()
    st.members[1] = 0.05
    assert proto.freeze_timeout(st, st.freeze_token, PP, 0.05 + 2 * T)
    assert st.mode is NodeMode.DESYNC_ACTIVE
    assert st.p_sw == pytest.approx(min(PP.p_sw_initial * PP.beta, 1.0))
    assert 1 not in st.members


def test_stale_timeout_is_ignored():
    st = frozen_node()
    assert not proto.freeze_timeout(st, st.freeze_token - 1, PP, 1.0)
    assert st.mode is NodeMode.FROZEN


def test_frozen_node_repeats_beacon_with_flag():
    st = frozen_node()
    st.members[1] = 0.05
    msgs = proto.fire(st, T, PP, random.Random(0))
    assert msgs == [Beacon(0, st.frozen_w, True)]
    assert st.next_fire == pytest.approx(2 * T)


def test_beacons_update_heard_count():
    st = proto.new_node(0, 1, 0.0, PP)
    for peer in range(1, 5):
        proto.on_message(st, Beacon(peer, 5, False, channel=1, timestamp=0.01 * peer), PP)
    assert st.w_heard == 5


def test_other_channels_are_not_heard():
    st = proto.new_node(0, 1, 0.0, PP)
    proto.on_message(st, Beacon(3, 2, False, channel=2, timestamp=0.01), PP)
    assert st.w_heard == 1


def test_listening_node_counts_target():
    params = ProtocolParams(n_channels_C=4, p_sw_initial=1.0)
    st = proto.new_node(0, 1, 0.0, params)
    for peer in (1, 2, 3):
        st.members[peer] = 0.0
    st.fires_in_channel = 1
    msgs = proto.fire(st, 0.25, params, random.Random(0))
    assert isinstance(msgs[-1], Switch) and st.mode is NodeMode.LISTENING
    assert st.tuned_channel == 2
    proto.on_message(st, Beacon(9, 1, False, channel=2, timestamp=0.3), params)
    joined, out = proto.end_listening(st, 0.5, params, random.Random(0))
    assert joined and out == [] and st.channel == 2
    assert 0.5 <= st.next_fire < 0.75


def test_failed_scout_fires_in_kept_slot():
    params = ProtocolParams(n_channels_C=4, p_sw_initial=1.0)
    st = proto.new_node(0, 1, 0.0, params)
    st.members[1] = 0.0
    st.fires_in_channel = 1
    proto.fire(st, 0.25, params, random.Random(0))
    for peer in (5, 6):
        proto.on_message(st, Beacon(peer, 2, False, channel=2, timestamp=0.3 + 0.01 * peer), params)
    joined, out = proto.end_listening(st, 0.5, params, random.Random(0))
    assert not joined
    assert isinstance(out[0], Beacon) and isinstance(out[1], Return)
    assert st.last_fire == 0.5 and st.next_fire == pytest.approx(0.75)
    assert st.p_sw == pytest.approx(1.0 / params.beta)


def test_join_midpoint_of_widest_gap():
    t = proto.join_time([0.10, 0.15, 0.20], now=0.30, T=0.25, how="midpoint", rng=random.Random(0))
    # widest gap runs from 0.20 to 0.35; midpoint 0.275 is already past, so next period
    assert t == pytest.approx(0.525)
