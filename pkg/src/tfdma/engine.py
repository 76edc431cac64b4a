"""Deterministic discrete-event executor for multi-channel TFDMA runs."""

from __future__ import annotations

import csv
import dataclasses
import heapq
import io
import json
import logging
import math
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import protocol as proto
from .desync import InvalidInput, gap_within_threshold
from .protocol import Beacon, Message, NodeMode, NodeState, ProtocolParams, Return, Switch

log = logging.getLogger(__name__)

# event priorities at equal timestamps: beacon fires first
FIRE, LISTEN_END, FREEZE_TIMEOUT, MEMBERSHIP, CHECK = range(5)

EVENT_KINDS = (
    "FIRE_BEACON",
    "SEND_SWITCH",
    "SEND_RETURN",
    "JOIN",
    "FREEZE",
    "UNFREEZE",
    "DROPPED_MSG",
    # additions: detector verdict, scripted membership, protocol anomalies
    "CONVERGED",
    "ARRIVE",
    "DEPART",
    "WARNING",
)

# the joint steady-state condition must hold without interruption this long
STABLE_PERIODS = 3


class NotAtSteadyState(ValueError):
    """Raised when a measurement window starts before the run converged."""


@dataclass(frozen=True)
class MembershipEvent:
    """Scripted arrival or departure. ``channel`` is used by arrivals only (0 = random)."""

    time: float
    kind: str  # "arrive" | "depart"
    node_id: int
    channel: int = 0


@dataclass(frozen=True)
class SimConfig:
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    n_nodes_W_tot: int = 16
    seed: int = 1
    max_time: float = 60.0
    message_loss_prob: float = 0.0
    # None = each node picks a channel uniformly at random; else counts per channel
    initial_assignment: tuple[int, ...] | None = None
    initial_phases: tuple[float, ...] | None = None
    propagation_delay: float = 0.0
    stop_on_convergence: bool = True
    settle_time: float = 0.0
    membership_events: tuple[MembershipEvent, ...] = ()
    record_trace: bool = True

    def __post_init__(self):
        C = self.protocol.n_channels_C
        if self.n_nodes_W_tot < 1:
            raise InvalidInput(f"n_nodes_W_tot must be >= 1, got {self.n_nodes_W_tot}")
        if not 0 <= self.message_loss_prob < 1:
            raise InvalidInput(f"message_loss_prob must lie in [0, 1), got {self.message_loss_prob}")
        if not self.max_time >= 0:
            raise InvalidInput(f"max_time must be >= 0, got {self.max_time}")
        if self.propagation_delay != 0:
            raise InvalidInput("only zero propagation delay is supported")
        if self.initial_assignment is not None:
            if len(self.initial_assignment) != C or sum(self.initial_assignment) != self.n_nodes_W_tot:
                raise InvalidInput("initial_assignment must have C entries summing to W_tot")
            if min(self.initial_assignment) < 0:
                raise InvalidInput("initial_assignment entries must be >= 0")
        if self.initial_phases is not None and len(self.initial_phases) != self.n_nodes_W_tot:
            raise InvalidInput("initial_phases must have W_tot entries")

    @property
    def balance_asserted(self) -> bool:
        return self.n_nodes_W_tot >= 2 * self.protocol.n_channels_C


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    channel: int
    node_id: int
    event_kind: str
    detail: str = ""


@dataclass
class SimTrace:
    records: list[TraceRecord] = field(default_factory=list)
    period: float = 0.25
    n_channels: int = 1
    # (check time, occupancy per channel) at every period boundary
    occupancy_history: list[tuple[float, tuple[int, ...]]] = field(default_factory=list)

    def add(self, t: float, channel: int, node: int, kind: str, detail: str = "") -> None:
        self.records.append(TraceRecord(t, channel, node, kind, detail))

    def of_kind(self, kind: str) -> list[TraceRecord]:
        return [r for r in self.records if r.event_kind == kind]

    def convergence_time(self) -> float | None:
        for r in self.records:
            if r.event_kind == "CONVERGED":
                return float(r.detail.split("=", 1)[1])
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "channel", "node", "event", "detail"])
        for r in self.records:
            w.writerow([f"{r.timestamp:.9f}", r.channel, r.node_id, r.event_kind, r.detail])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "time_s": f"{r.timestamp:.9f}",
                    "channel": r.channel,
                    "node": r.node_id,
                    "event": r.event_kind,
                    "detail": r.detail,
                }
            )
            for r in self.records
        ]
        return "".join(line + "\n" for line in lines)


@dataclass
class RunSummary:
    converged: bool
    convergence_time: float | None
    final_occupancy: list[int]
    switch_attempts: int
    returns: int
    per_node_airtime_share: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def is_balanced(counts: Sequence[int], W_tot: int) -> bool:
    C = len(counts)
    lo, hi = W_tot // C, -(-W_tot // C)
    return all(lo <= c <= hi for c in counts)


class Simulator:
    """One TFDMA run. Use :func:`run` unless you need to poke at internals."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.params = config.protocol
        self.C = self.params.n_channels_C
        self.T = self.params.T
        seed = config.seed
        self.rng_place = random.Random(f"{seed}:placement")
        self.rng_decide = random.Random(f"{seed}:decisions")
        self.rng_loss = random.Random(f"{seed}:loss")
        self.trace = SimTrace(period=self.T, n_channels=self.C)
        self.nodes: dict[int, NodeState] = {}
        self._heap: list[tuple] = []
        self._seq = 0
        self._fire_token: dict[int, int] = {}
        self.now = 0.0
        self.switch_attempts = 0
        self.returns = 0
        self.messages_sent = 0
        self.messages_dropped = 0
        self._steady_since: float | None = None
        self.converged_at: float | None = None
        self._stop_at = config.max_time
        self._place_nodes()

    # -- setup -------------------------------------------------------------

    def _place_nodes(self) -> None:
        cfg = self.config
        W = cfg.n_nodes_W_tot
        if cfg.initial_assignment is None:
            channels = [self.rng_place.randint(1, self.C) for _ in range(W)]
        else:
            channels = [c + 1 for c, n in enumerate(cfg.initial_assignment) for _ in range(n)]
        if cfg.initial_phases is None:
            phases = [self.rng_place.uniform(0.0, self.T) for _ in range(W)]
        else:
            phases = list(cfg.initial_phases)
        for i in range(W):
            self._add_node(i, channels[i], phases[i])
        for ev in cfg.membership_events:
            self._push(ev.time, MEMBERSHIP, ev.node_id, ev)
        k = 1
        while k * self.T <= cfg.max_time + 1e-12:
            self._push(k * self.T, CHECK, 0, k)
            k += 1

    def _add_node(self, node_id: int, channel: int, first_fire: float) -> None:
        self.nodes[node_id] = proto.new_node(node_id, channel, first_fire, self.params)
        self._schedule_fire(node_id)

    # -- queue -------------------------------------------------------------

    def _push(self, t: float, prio: int, node: int, payload=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, prio, node, self._seq, payload))

    def _schedule_fire(self, node_id: int) -> None:
        st = self.nodes[node_id]
        tok = self._fire_token.get(node_id, 0) + 1
        self._fire_token[node_id] = tok
        if st.next_fire is not None:
            self._push(st.next_fire, FIRE, node_id, tok)

    def _log(self, channel: int, node: int, kind: str, detail: str = "") -> None:
        if self.config.record_trace:
            self.trace.add(self.now, channel, node, kind, detail)

    # -- medium ------------------------------------------------------------

    def broadcast(self, channel: int, msg: Message) -> None:
        """Deliver ``msg`` to every node tuned to ``channel`` except the sender."""
        msg = dataclasses.replace(msg, channel=channel, timestamp=self.now)
        loss = self.config.message_loss_prob
        for nid in sorted(self.nodes):
            if nid == msg.node_id:
                continue
            st = self.nodes[nid]
            if st.tuned_channel != channel:
                continue
            self.messages_sent += 1
            if loss > 0 and self.rng_loss.random() < loss:
                self.messages_dropped += 1
                self._log(channel, nid, "DROPPED_MSG", f"{type(msg).__name__.lower()} from {msg.node_id}")
                continue
            self._deliver(st, msg)

    def _deliver(self, st: NodeState, msg: Message) -> None:
        before_fire, before_mode = st.next_fire, st.mode
        if isinstance(msg, Return) and st.mode is not NodeMode.FROZEN and st.mode is not NodeMode.LISTENING:
            self._log(msg.channel, st.node_id, "WARNING", f"return from {msg.node_id} while not frozen")
        proto.on_message(st, msg, self.params)
        if st.mode is NodeMode.FROZEN and before_mode is not NodeMode.FROZEN:
            self._log(st.channel, st.node_id, "FREEZE", f"switcher={msg.node_id}")
            self._push(st.frozen_until, FREEZE_TIMEOUT, st.node_id, st.freeze_token)
        elif before_mode is NodeMode.FROZEN and st.mode is not NodeMode.FROZEN:
            self._log(st.channel, st.node_id, "UNFREEZE", "outcome=returned")
        if st.next_fire != before_fire:
            self._schedule_fire(st.node_id)

    def _emit(self, st: NodeState, channel: int, msgs: Iterable[Message]) -> None:
        for m in msgs:
            if isinstance(m, Beacon):
                self._log(channel, st.node_id, "FIRE_BEACON", f"w={m.w_count};sw={int(m.switch_flag)}")
            elif isinstance(m, Switch):
                self.switch_attempts += 1
                self._log(channel, st.node_id, "SEND_SWITCH", f"target={st.target}")
            elif isinstance(m, Return):
                self.returns += 1
                self._log(channel, st.node_id, "SEND_RETURN", "")
            self.broadcast(channel, m)

    # -- handlers ----------------------------------------------------------

    def _on_fire(self, nid: int, token: int) -> None:
        st = self.nodes.get(nid)
        if st is None or token != self._fire_token.get(nid) or st.mode is NodeMode.LISTENING:
            return
        channel = st.channel
        msgs = proto.fire(st, self.now, self.params, self.rng_decide)
        self._emit(st, channel, msgs)
        if st.mode is NodeMode.LISTENING:
            self._push(self.now + self.T, LISTEN_END, nid)
        self._schedule_fire(nid)

    def _on_listen_end(self, nid: int) -> None:
        st = self.nodes.get(nid)
        if st is None or st.mode is not NodeMode.LISTENING:
            return
        origin, target = st.channel, st.target
        joined, msgs = proto.end_listening(st, self.now, self.params, self.rng_decide)
        if joined:
            self._log(target, nid, "JOIN", f"from={origin};to={target}")
        self._emit(st, st.channel, msgs)
        self._schedule_fire(nid)

    def _on_freeze_timeout(self, nid: int, token: int) -> None:
        st = self.nodes.get(nid)
        if st is None:
            return
        before = st.next_fire
        if proto.freeze_timeout(st, token, self.params, self.now):
            self._log(st.channel, nid, "UNFREEZE", "outcome=departed")
            if st.next_fire != before:
                self._schedule_fire(nid)

    def _on_membership(self, ev: MembershipEvent) -> None:
        if ev.kind == "depart":
            st = self.nodes.pop(ev.node_id, None)
            if st is not None:
                self._log(st.channel, ev.node_id, "DEPART", "")
        elif ev.kind == "arrive":
            if ev.node_id in self.nodes:
                raise InvalidInput(f"node {ev.node_id} already present")
            ch = ev.channel or self.rng_place.randint(1, self.C)
            self._add_node(ev.node_id, ch, self.now + self.rng_place.uniform(0.0, self.T))
            self._log(ch, ev.node_id, "ARRIVE", "")
        else:
            raise InvalidInput(f"unknown membership event {ev.kind!r}")

    def occupancy(self) -> tuple[int, ...]:
        counts = [0] * self.C
        for st in self.nodes.values():
            counts[st.channel - 1] += 1
        return tuple(counts)

    def _steady(self, counts: tuple[int, ...]) -> bool:
        if not is_balanced(counts, len(self.nodes)):
            return False
        dp = self.params.desync
        for st in self.nodes.values():
            if st.steady_gap is None or not gap_within_threshold(st.steady_gap, dp):
                return False
            if self.now - st.last_fire > 1.5 * self.T:
                return False
        return True

    def _on_check(self) -> None:
        self.trace.occupancy_history.append((self.now, self.occupancy()))

    def _update_detector(self) -> None:
        """Track since when the joint condition (balance + every node periodic) holds."""
        if self.converged_at is not None:
            return
        if not self._steady(self.occupancy()):
            self._steady_since = None
            return
        if self._steady_since is None:
            self._steady_since = self.now
        if self.now - self._steady_since >= STABLE_PERIODS * self.T - 1e-9:
            self.converged_at = self._steady_since
            self._log(0, -1, "CONVERGED", f"since={self.converged_at:.9f}")
            if self.config.stop_on_convergence:
                self._stop_at = min(self._stop_at, self.now + self.config.settle_time)

    # -- main loop ---------------------------------------------------------

    def run(self) -> tuple[SimTrace, RunSummary]:
        while self._heap:
            t, prio, nid, _, payload = self._heap[0]
            if t > self._stop_at:
                break
            heapq.heappop(self._heap)
            self.now = t
            if prio == FIRE:
                self._on_fire(nid, payload)
            elif prio == LISTEN_END:
                self._on_listen_end(nid)
            elif prio == FREEZE_TIMEOUT:
                self._on_freeze_timeout(nid, payload)
            elif prio == MEMBERSHIP:
                self._on_membership(payload)
            else:
                self._on_check()
            self._update_detector()
        end = min(self._stop_at, self.config.max_time)
        shares: list[float] = []
        if self.converged_at is not None and self.config.record_trace and end > self.converged_at:
            by_node = airtime_shares(self.trace, (self.converged_at, end))
            shares = [by_node.get(n, 0.0) for n in sorted(self.nodes)]
        summary = RunSummary(
            converged=self.converged_at is not None,
            convergence_time=self.converged_at,
            final_occupancy=list(self.occupancy()),
            switch_attempts=self.switch_attempts,
            returns=self.returns,
            per_node_airtime_share=shares,
        )
        return self.trace, summary


def run(config: SimConfig) -> tuple[SimTrace, RunSummary]:
    """Execute one run until global steady state or ``max_time``."""
    return Simulator(config).run()


def airtime_shares(trace: SimTrace, window: tuple[float, float]) -> dict[int, float]:
    """Per-node share of its channel's airtime over ``window``.

    A node's share is the gap from each of its beacons to the next beacon in
    the same channel, divided by the period and averaged over its beacons in
    the window.
    """
    start, end = window
    conv = trace.convergence_time()
    if conv is None or start < conv - 1e-9:
        raise NotAtSteadyState(f"window starts at {start}, run converged at {conv}")
    T = trace.period
    per_channel: dict[int, list[tuple[float, int]]] = {}
    for r in trace.records:
        if r.event_kind == "FIRE_BEACON":
            per_channel.setdefault(r.channel, []).append((r.timestamp, r.node_id))
    samples: dict[int, list[float]] = {}
    for beacons in per_channel.values():
        for (t, node), (t_next, _) in zip(beacons, beacons[1:]):
            if start <= t < end:
                samples.setdefault(node, []).append((t_next - t) / T)
    return {n: float(np.mean(v)) for n, v in sorted(samples.items())}


@dataclass
class DelayStats:
    n_runs: int
    n_converged: int
    n_nonconverged: int
    mean: float | None
    sem: float | None
    sd: float | None
    quantiles: dict[str, float]
    samples: list[float]


def replication_seeds(seed: int, n_runs: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_runs)]


def _run_delay(config: SimConfig) -> float | None:
    return run(config)[1].convergence_time


def convergence_time_distribution(config: SimConfig, n_runs: int, workers: int = 1) -> DelayStats:
    """Independent replications with seeds derived from ``config.seed``."""
    if n_runs < 1:
        raise InvalidInput("n_runs must be >= 1")
    cfgs = [
        dataclasses.replace(config, seed=s, record_trace=False, settle_time=0.0, stop_on_convergence=True)
        for s in replication_seeds(config.seed, n_runs)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            delays = list(ex.map(_run_delay, cfgs, chunksize=max(1, n_runs // (4 * workers))))
    else:
        delays = [_run_delay(c) for c in cfgs]
    ok = [d for d in delays if d is not None]
    stats = DelayStats(
        n_runs=n_runs,
        n_converged=len(ok),
        n_nonconverged=n_runs - len(ok),
        mean=None,
        sem=None,
        sd=None,
        quantiles={},
        samples=ok,
    )
    if ok:
        stats.mean = statistics.fmean(ok)
        if len(ok) > 1:
            stats.sd = statistics.stdev(ok)
            stats.sem = stats.sd / math.sqrt(len(ok))
        q = np.quantile(ok, [0.05, 0.25, 0.5, 0.75, 0.95])
        stats.quantiles = dict(zip(["q05", "q25", "q50", "q75", "q95"], map(float, q)))
    return stats
