"""Single-channel desynchronization (reactive listening TDMA).

Each node fires a beacon once per period. Right after hearing the beacon of
the node that follows it, a node moves its next firing toward the midpoint of
its two neighbours' firings. Once every node's firing interval is within
``q_ss * T`` of ``T`` the channel is considered to be at steady state.
"""

from __future__ import annotations

import heapq
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

log = logging.getLogger(__name__)


class InvalidInput(ValueError):
    """Raised on malformed or non-finite arguments."""


class InsufficientHistory(ValueError):
    """Raised when a steady-state test needs more firings than are recorded."""


@dataclass(frozen=True)
class DesyncParams:
    period_T: float = 0.25
    alpha: float = 0.95
    q_ss: float = 0.02

    def __post_init__(self):
        if not (math.isfinite(self.period_T) and self.period_T > 0):
            raise InvalidInput(f"period_T must be > 0, got {self.period_T}")
        if not 0 < self.alpha < 1:
            raise InvalidInput(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.q_ss < 1:
            raise InvalidInput(f"q_ss must lie in (0, 1), got {self.q_ss}")


@dataclass(frozen=True)
class PhaseNeighborhood:
    """Latest firings of the previous neighbour, the node itself and the next neighbour."""

    t_prev: float
    t_curr: float
    t_next: float


@dataclass
class BeaconSchedule:
    node_id: int
    fire_times: list[float] = field(default_factory=list)


def next_fire_time(nb: PhaseNeighborhood, p: DesyncParams) -> float:
    """Reactive listening update: absolute time of the node's next beacon."""
    if not all(math.isfinite(x) for x in (nb.t_prev, nb.t_curr, nb.t_next)):
        raise InvalidInput(f"non-finite neighbourhood {nb}")
    return p.period_T + (1 - p.alpha) * nb.t_curr + p.alpha * (nb.t_prev + nb.t_next) / 2


def gap_within_threshold(gap: float, p: DesyncParams) -> bool:
    return abs(gap - p.period_T) < p.q_ss * p.period_T


def is_steady_state(s: BeaconSchedule, p: DesyncParams) -> bool:
    """True iff the node's latest firing interval is within ``q_ss * T`` of ``T``."""
    if len(s.fire_times) < 2:
        raise InsufficientHistory(f"node {s.node_id} has {len(s.fire_times)} firing(s), need 2")
    return gap_within_threshold(s.fire_times[-1] - s.fire_times[-2], p)


def channel_steady_state(schedules: Sequence[BeaconSchedule], p: DesyncParams) -> bool:
    """Channel-level test: every node satisfies the per-node criterion simultaneously."""
    return all(is_steady_state(s, p) for s in schedules)


def random_phases(n_nodes: int, p: DesyncParams, rng: random.Random) -> list[float]:
    return [rng.uniform(0.0, p.period_T) for _ in range(n_nodes)]


class DesyncChannel:
    """Event-ordered simulation of one channel running pure desynchronization.

    Firings are processed in (time, node id) order. A node remembers the last
    beacon it heard before its own firing (``t_prev``) and applies the update
    as soon as the next beacon after its own firing arrives.
    """

    def __init__(self, phases: Sequence[float], params: DesyncParams):
        if not phases:
            raise InvalidInput("at least one node is required")
        self.params = params
        self.schedules = [BeaconSchedule(i) for i in range(len(phases))]
        self._next_fire = [float(t) for t in phases]
        self._pending: dict[int, tuple[float, float]] = {}
        self._last_beacon: tuple[float, int] | None = None
        self._heap = [(t, i) for i, t in enumerate(self._next_fire)]
        heapq.heapify(self._heap)

    @property
    def n_nodes(self) -> int:
        return len(self.schedules)

    def step(self) -> tuple[int, float]:
        """Fire the earliest pending beacon; returns ``(node_id, time)``."""
        while True:
            t, i = heapq.heappop(self._heap)
            if t == self._next_fire[i]:
                break
        T = self.params.period_T
        # deliver the beacon to nodes waiting for their next neighbour
        for j in sorted(self._pending):
            if j == i:
                continue
            t_prev, t_curr = self._pending.pop(j)
            new = max(next_fire_time(PhaseNeighborhood(t_prev, t_curr, t), self.params), t)
            self._reschedule(j, new)
        self._pending.pop(i, None)
        if self._last_beacon is not None:
            t_last, sender = self._last_beacon
            if sender != i and t - t_last < T:
                self._pending[i] = (t_last, t)
        self.schedules[i].fire_times.append(t)
        self._last_beacon = (t, i)
        self._reschedule(i, t + T)
        return i, t

    def _reschedule(self, i: int, t: float) -> None:
        self._next_fire[i] = t
        heapq.heappush(self._heap, (t, i))

    def run_rounds(self, n_rounds: int) -> None:
        """Advance until every node has fired at least ``n_rounds`` times."""
        while min(len(s.fire_times) for s in self.schedules) < n_rounds:
            self.step()

    def round_is_steady(self, k: int) -> bool:
        """Whether every node's interval between firings k-1 and k meets the threshold."""
        return all(
            gap_within_threshold(s.fire_times[k] - s.fire_times[k - 1], self.params)
            for s in self.schedules
        )

    def firing_order(self, k: int) -> list[int]:
        """Node ids sorted by their k-th firing time."""
        return sorted(range(self.n_nodes), key=lambda i: (self.schedules[i].fire_times[k], i))


@dataclass
class DesyncRun:
    converged: bool
    k_ss: int | None
    channel: DesyncChannel


def simulate_until_steady(
    n_nodes: int,
    p: DesyncParams,
    seed: int | None = None,
    max_periods: int = 1000,
    phases: Sequence[float] | None = None,
) -> DesyncRun:
    if n_nodes < 1:
        raise InvalidInput(f"n_nodes must be >= 1, got {n_nodes}")
    if phases is None:
        phases = random_phases(n_nodes, p, random.Random(seed))
    elif len(phases) != n_nodes:
        raise InvalidInput("len(phases) != n_nodes")
    ch = DesyncChannel(phases, p)
    for k in range(1, max_periods + 1):
        ch.run_rounds(k + 1)
        if ch.round_is_steady(k):
            return DesyncRun(True, k, ch)
    log.warning("desync of %d nodes did not converge within %d periods", n_nodes, max_periods)
    return DesyncRun(False, None, ch)


def periods_to_steady_state(
    n_nodes: int,
    p: DesyncParams,
    seed: int | None = None,
    max_periods: int = 1000,
    phases: Sequence[float] | None = None,
) -> int | None:
    """First period index at which the whole channel is at steady state.

    Returns ``None`` (and logs a warning) if the cap is hit first.
    """
    return simulate_until_steady(n_nodes, p, seed, max_periods, phases).k_ss
