"""Per-node multi-channel state machine.

A node that decides to scout another channel announces it with a Switch
message, listens silently to the target channel for one period and either
joins it (if it holds at least two fewer nodes) or comes back and announces a
Return. Peers in the origin channel freeze their beacon schedule meanwhile and
adapt the shared switching probability and direction from the outcome.

All transition functions update the given :class:`NodeState` in place and
return whatever the node emits; the simulation engine owns delivery and time.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Union

from .desync import DesyncParams, InvalidInput, PhaseNeighborhood, next_fire_time


class NoTargetChannel(ValueError):
    """Raised when switching is requested with a single channel."""


def max_offset(n_channels: int) -> int:
    return max(1, n_channels // 2)


@dataclass(frozen=True)
class ProtocolParams:
    n_channels_C: int = 8
    beta: float = 1.25
    p_sw_initial: float = 0.33
    s_initial: int = 1
    Z: int = 60
    desync: DesyncParams = field(default_factory=DesyncParams)
    join_phase: str = "midpoint"  # or "random"
    # how a scout treats a target channel in switch mode: "fail" or "count"
    busy_target: str = "count"

    def __post_init__(self):
        if self.n_channels_C < 1:
            raise InvalidInput(f"n_channels_C must be >= 1, got {self.n_channels_C}")
        if not self.beta > 1:
            raise InvalidInput(f"beta must be > 1, got {self.beta}")
        if not 0 < self.p_sw_initial <= 1:
            raise InvalidInput(f"p_sw_initial must lie in (0, 1], got {self.p_sw_initial}")
        if not 1 <= abs(self.s_initial) <= max_offset(self.n_channels_C):
            raise InvalidInput(f"|s_initial| must lie in 1..{max_offset(self.n_channels_C)}")
        if self.Z < 1:
            raise InvalidInput(f"Z must be >= 1, got {self.Z}")
        if self.join_phase not in ("midpoint", "random"):
            raise InvalidInput(f"unknown join_phase {self.join_phase!r}")
        if self.busy_target not in ("fail", "count"):
            raise InvalidInput(f"unknown busy_target {self.busy_target!r}")

    @property
    def T(self) -> float:
        return self.desync.period_T


class NodeMode(enum.Enum):
    DESYNC_ACTIVE = "DESYNC_ACTIVE"
    FROZEN = "FROZEN"
    LISTENING = "LISTENING"
    REJOINING = "REJOINING"


@dataclass(frozen=True)
class Beacon:
    node_id: int
    w_count: int
    switch_flag: bool
    channel: int = 0
    timestamp: float = 0.0


@dataclass(frozen=True)
class Switch:
    node_id: int
    channel: int = 0
    timestamp: float = 0.0


@dataclass(frozen=True)
class Return:
    node_id: int
    channel: int = 0
    timestamp: float = 0.0


Message = Union[Beacon, Switch, Return]


@dataclass
class ChannelLocalView:
    channel_index: int
    w_heard: int
    switch_mode_active: bool
    p_sw: float
    s_offset: int
    periods_since_attempt: int


@dataclass
class NodeState:
    node_id: int
    channel: int
    p_sw: float
    s_offset: int
    next_fire: float | None
    mode: NodeMode = NodeMode.DESYNC_ACTIVE
    fail_streak: int = 0
    periods_since_attempt: int = 0
    # peers of the current channel -> time their last beacon was heard
    members: dict[int, float] = field(default_factory=dict)
    last_fire: float | None = None
    prev_fire: float | None = None
    # what set next_fire: "default", "eq1", "freeze" (repeat) or "join"
    fire_source: str = "default"
    # latest firing interval not dictated by switch mode; steady-state evidence
    steady_gap: float | None = None
    fires_in_channel: int = 0
    last_other_beacon: float | None = None
    pending: tuple[float, float] | None = None
    # neighbourhood completed while frozen, applied when switch mode ends
    held: PhaseNeighborhood | None = None
    # switch mode (origin side)
    frozen_until: float | None = None
    frozen_w: int = 0
    freeze_token: int = 0
    switcher: int | None = None
    # scouting (switching side)
    target: int | None = None
    listen_start: float | None = None
    origin_w: int = 0
    heard_times: list[float] = field(default_factory=list)
    heard_senders: dict[int, float] = field(default_factory=dict)
    w_target: int = 0
    target_busy: bool = False

    @property
    def w_heard(self) -> int:
        return 1 + len(self.members)

    @property
    def tuned_channel(self) -> int:
        return self.target if self.mode is NodeMode.LISTENING else self.channel

    def view(self) -> ChannelLocalView:
        return ChannelLocalView(
            channel_index=self.channel,
            w_heard=self.w_heard,
            switch_mode_active=self.mode is NodeMode.FROZEN,
            p_sw=self.p_sw,
            s_offset=self.s_offset,
            periods_since_attempt=self.periods_since_attempt,
        )


def new_node(node_id: int, channel: int, first_fire: float, params: ProtocolParams) -> NodeState:
    return NodeState(
        node_id=node_id,
        channel=channel,
        p_sw=params.p_sw_initial,
        s_offset=params.s_initial,
        next_fire=first_fire,
    )


# -- pure decision rules -----------------------------------------------------


def decide_switch_attempt(view: ChannelLocalView, params: ProtocolParams, rng: random.Random) -> bool:
    """Whether a node attempts a switch right after its own beacon.

    Forced once ``Z`` periods have passed without switching activity; otherwise
    a Bernoulli draw with the channel's switching probability.
    """
    if view.periods_since_attempt >= params.Z:
        return True
    return rng.random() < view.p_sw


def target_channel(current: int, s_offset: int, C: int) -> int:
    """Channel ``current + s_offset`` with cyclic wrap into ``1..C``."""
    if C <= 1:
        raise NoTargetChannel("switching needs at least two channels")
    if not 1 <= current <= C:
        raise InvalidInput(f"channel {current} outside 1..{C}")
    if not 1 <= abs(s_offset) <= max_offset(C):
        raise InvalidInput(f"offset {s_offset} outside ±1..±{max_offset(C)}")
    return (current - 1 + s_offset) % C + 1


def evaluate_join(w_origin: int, w_target: int) -> bool:
    return w_target <= w_origin - 2


def update_switch_probability(p_prev: float, returned: bool, beta: float) -> float:
    if returned:
        return p_prev / beta
    return min(beta * p_prev, 1.0)


def update_direction(s_prev: int, returned: bool, C: int, fail_streak: int = 1, s_initial: int = 1) -> int:
    """Next scouting offset after a switch attempt.

    A failure flips the direction; every second consecutive failure also widens
    the offset by one channel. Past the widest offset ``C // 2`` the scan starts
    over at 1. A success resets to ``s_initial``. ``fail_streak`` counts
    consecutive failures including this one.
    """
    if not returned:
        return s_initial
    sign = -1 if s_prev > 0 else 1
    mag = abs(s_prev)
    if fail_streak % 2 == 0:
        mag = mag + 1 if mag < max_offset(C) else 1
    return sign * mag


# -- node transitions ----------------------------------------------------------


def _expire_members(state: NodeState, now: float, T: float) -> None:
    stale = [n for n, t in state.members.items() if now - t > 2 * T]
    for n in stale:
        del state.members[n]


def _record_fire(state: NodeState, now: float) -> None:
    if state.last_fire is not None and state.fire_source != "freeze":
        state.steady_gap = now - state.last_fire
    state.prev_fire = state.last_fire
    state.last_fire = now
    state.fires_in_channel += 1


def fire(state: NodeState, now: float, params: ProtocolParams, rng: random.Random) -> list[Message]:
    """The node's own beacon slot: emit a beacon and maybe start scouting."""
    T = params.T
    t_prev = state.last_other_beacon
    if t_prev is not None and not now - t_prev < T:
        t_prev = None
    if state.mode is NodeMode.FROZEN:
        _record_fire(state, now)
        state.next_fire = now + T
        state.fire_source = "freeze"
        state.pending = (t_prev, now) if t_prev is not None else None
        state.held = None
        return [Beacon(state.node_id, state.frozen_w, True)]

    _expire_members(state, now, T)
    _record_fire(state, now)
    out: list[Message] = [Beacon(state.node_id, state.w_heard, False)]
    state.mode = NodeMode.DESYNC_ACTIVE
    state.next_fire = now + T
    state.fire_source = "default"
    state.pending = (t_prev, now) if t_prev is not None else None
    state.periods_since_attempt += 1

    # a node must have spent a full period in the channel to know its occupancy
    if params.n_channels_C > 1 and state.fires_in_channel >= 2:
        if decide_switch_attempt(state.view(), params, rng):
            out.append(Switch(state.node_id))
            state.mode = NodeMode.LISTENING
            state.target = target_channel(state.channel, state.s_offset, params.n_channels_C)
            state.listen_start = now
            state.origin_w = state.w_heard
            state.heard_times = []
            state.heard_senders = {}
            state.w_target = 0
            state.target_busy = False
            state.next_fire = None
            state.pending = None
            state.periods_since_attempt = 0
    return out


def on_message(state: NodeState, msg: Message, params: ProtocolParams) -> NodeState:
    """Apply a message delivered on the node's tuned channel."""
    T = params.T
    if state.mode is NodeMode.LISTENING:
        if msg.channel != state.target:
            return state
        if isinstance(msg, Beacon):
            state.heard_times.append(msg.timestamp)
            state.heard_senders[msg.node_id] = msg.timestamp
            state.w_target = max(state.w_target, msg.w_count)
            if msg.switch_flag:
                state.target_busy = True
        elif isinstance(msg, Switch):
            state.target_busy = True
        return state

    if msg.channel != state.channel or msg.node_id == state.node_id:
        return state

    if isinstance(msg, Beacon):
        state.members[msg.node_id] = msg.timestamp
        state.last_other_beacon = msg.timestamp
        if state.pending is not None:
            t_prev, t_curr = state.pending
            nb = PhaseNeighborhood(t_prev, t_curr, msg.timestamp)
            state.pending = None
            if state.mode is NodeMode.FROZEN:
                state.held = nb
            else:
                state.next_fire = max(next_fire_time(nb, params.desync), msg.timestamp)
                state.fire_source = "eq1"
    elif isinstance(msg, Switch):
        state.periods_since_attempt = 0
        if state.mode is not NodeMode.FROZEN:
            state.mode = NodeMode.FROZEN
            state.frozen_w = state.w_heard
            state.switcher = msg.node_id
            state.frozen_until = msg.timestamp + 2 * T
            state.freeze_token += 1
            state.held = None
            if state.last_fire is not None and state.last_fire + T >= msg.timestamp:
                state.next_fire = state.last_fire + T
                state.fire_source = "freeze"
    elif isinstance(msg, Return):
        if state.mode is NodeMode.FROZEN:
            _leave_switch_mode(state, params, returned=True, now=msg.timestamp)
    return state


def _leave_switch_mode(state: NodeState, params: ProtocolParams, returned: bool, now: float) -> None:
    state.mode = NodeMode.DESYNC_ACTIVE
    state.frozen_until = None
    nb, state.held = state.held, None
    # resume desynchronization from the neighbourhood observed during the freeze
    if nb is not None and nb.t_curr == state.last_fire:
        t = next_fire_time(nb, params.desync)
        if t > now:
            state.next_fire = t
            state.fire_source = "eq1"
    _apply_outcome(state, params, returned)
    if not returned and state.switcher is not None:
        state.members.pop(state.switcher, None)
    state.switcher = None


def _apply_outcome(state: NodeState, params: ProtocolParams, returned: bool) -> None:
    state.p_sw = update_switch_probability(state.p_sw, returned, params.beta)
    state.fail_streak = state.fail_streak + 1 if returned else 0
    state.s_offset = update_direction(
        state.s_offset, returned, params.n_channels_C, state.fail_streak, params.s_initial
    )


def freeze_timeout(state: NodeState, token: int, params: ProtocolParams, now: float) -> bool:
    """Two periods of switch mode without a Return: the scout has left.

    Returns True if the node actually left switch mode.
    """
    if state.mode is not NodeMode.FROZEN or token != state.freeze_token:
        return False
    _leave_switch_mode(state, params, returned=False, now=now)
    return True


def join_time(heard: list[float], now: float, T: float, how: str, rng: random.Random) -> float:
    """First beacon time in a newly joined channel.

    ``midpoint`` places it in the middle of the widest gap between the beacons
    heard while scouting; ``random`` draws a uniform phase.
    """
    if how == "random":
        return now + rng.uniform(0.0, T)
    if not heard:
        return now
    ts = sorted(heard)
    best_start, best_gap = ts[-1], ts[0] + T - ts[-1]
    for a, b in zip(ts, ts[1:]):
        if b - a > best_gap:
            best_start, best_gap = a, b - a
    t = best_start + best_gap / 2
    while t < now:
        t += T
    return t


def end_listening(
    state: NodeState, now: float, params: ProtocolParams, rng: random.Random
) -> tuple[bool, list[Message]]:
    """Scouting period over: join the target or return to the origin slot.

    Returns ``(joined, emissions)``; on return the node fires its beacon at once
    (its frozen slot) followed by a Return message.
    """
    if state.mode is not NodeMode.LISTENING:
        raise InvalidInput(f"node {state.node_id} is not listening")
    w_target = max(state.w_target, len(state.heard_senders))
    joined = evaluate_join(state.origin_w, w_target)
    if state.target_busy and params.busy_target == "fail":
        joined = False
    _apply_outcome(state, params, returned=not joined)
    state.mode = NodeMode.REJOINING
    state.periods_since_attempt = 0
    state.pending = None
    if joined:
        state.channel = state.target
        state.members = dict(state.heard_senders)
        state.last_other_beacon = max(state.heard_times) if state.heard_times else None
        state.last_fire = state.prev_fire = state.steady_gap = None
        state.fires_in_channel = 0
        state.next_fire = join_time(state.heard_times, now, params.T, params.join_phase, rng)
        state.fire_source = "join"
        state.target = None
        return True, []
    state.target = None
    state.last_other_beacon = None
    # back in the slot the frozen peers kept free
    state.fire_source = "freeze"
    _record_fire(state, now)
    state.next_fire = now + params.T
    state.fire_source = "default"
    return False, [Beacon(state.node_id, state.w_heard, False), Return(state.node_id)]
