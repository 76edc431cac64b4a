"""Analytic estimate of the time to reach balanced occupancy.

Every way of spreading ``W_tot`` identical nodes over ``C`` channels is
weighted by its probability under uniform random channel choice. Each
composition contributes the expected number of periods needed for its most
imbalanced channel to shed or absorb its excess, one departure at a time.
"""

from __future__ import annotations

import csv
import enum
import functools
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .desync import InvalidInput


class CompositionLimitExceeded(ValueError):
    """Raised when exact enumeration would exceed the configured size limit."""


class Mode(str, enum.Enum):
    AS_PRINTED = "as-printed"
    EXACT_MULTINOMIAL = "multinomial"


@dataclass(frozen=True)
class Composition:
    counts: tuple[int, ...]
    index_i: int = 0

    @property
    def W_tot(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class DelayParams:
    W_tot: int = 16
    C: int = 8
    T: float = 0.25
    p_sw_0: float = 0.33
    beta: float = 1.25
    Z: int = 60
    k_ss: int = 6

    def __post_init__(self):
        if self.W_tot < 1 or self.C < 1 or self.Z < 1 or self.k_ss < 0:
            raise InvalidInput("W_tot, C and Z must be positive and k_ss non-negative")
        if not (math.isfinite(self.T) and self.T > 0):
            raise InvalidInput(f"T must be > 0, got {self.T}")
        if not 0 < self.p_sw_0 <= 1:
            raise InvalidInput(f"p_sw_0 must lie in (0, 1], got {self.p_sw_0}")
        if not self.beta > 1:
            raise InvalidInput(f"beta must be > 1, got {self.beta}")


@dataclass(frozen=True)
class CompositionTerm:
    composition: Composition
    probability: float
    W_diff: int
    expected_periods: float


@dataclass
class DelayEstimate:
    total_seconds: float
    params: DelayParams
    mode: Mode
    probability_sum: float
    n_compositions: int
    sampled: bool = False
    per_composition: list[CompositionTerm] = field(default_factory=list)

    def recompute(self) -> float:
        """Total rebuilt from the per-composition terms."""
        acc = math.fsum(t.probability * t.expected_periods for t in self.per_composition)
        return self.params.T * (acc + self.params.k_ss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "counts", "p_i", "W_diff", "d_periods"])
        for t in self.per_composition:
            counts = " ".join(str(x) for x in t.composition.counts)
            w.writerow([t.composition.index_i, counts, repr(t.probability), t.W_diff, repr(t.expected_periods)])
        return buf.getvalue()

    def to_json(self, include_terms: bool = False) -> str:
        d = {
            "total_seconds": self.total_seconds,
            "mode": self.mode.value,
            "probability_sum": self.probability_sum,
            "n_compositions": self.n_compositions,
            "sampled": self.sampled,
            "params": asdict(self.params),
        }
        if include_terms:
            d["per_composition"] = [
                {
                    "i": t.composition.index_i,
                    "counts": list(t.composition.counts),
                    "p_i": t.probability,
                    "W_diff": t.W_diff,
                    "d_periods": t.expected_periods,
                }
                for t in self.per_composition
            ]
        return json.dumps(d, sort_keys=True)


def composition_count(W_tot: int, C: int) -> int:
    """Number of ordered distributions of W_tot identical nodes over C channels."""
    if W_tot < 0 or C < 1:
        raise InvalidInput("need W_tot >= 0 and C >= 1")
    return math.comb(W_tot + C - 1, C - 1)


def iter_compositions(W_tot: int, C: int) -> Iterator[tuple[int, ...]]:
    """Compositions in lexicographic order.

    Stars and bars: the C - 1 bar positions, taken in lexicographic order,
    give the compositions in lexicographic order too.
    """
    if W_tot < 0 or C < 1:
        raise InvalidInput("need W_tot >= 0 and C >= 1")
    end = W_tot + C - 1
    for bars in itertools.combinations(range(end), C - 1):
        prev = -1
        out = []
        for b in bars:
            out.append(b - prev - 1)
            prev = b
        out.append(end - prev - 1)
        yield tuple(out)


def enumerate_compositions(W_tot: int, C: int) -> list[Composition]:
    return [Composition(c, i) for i, c in enumerate(iter_compositions(W_tot, C), start=1)]


@functools.lru_cache(maxsize=None)
def _fact(n: int) -> int:
    return math.factorial(n)


def _counts(comp: Composition | tuple[int, ...]) -> tuple[int, ...]:
    return comp.counts if isinstance(comp, Composition) else tuple(comp)


def composition_probability(comp: Composition | tuple[int, ...], C: int, mode: Mode = Mode.EXACT_MULTINOMIAL) -> float:
    counts = _counts(comp)
    if len(counts) != C or any(x < 0 for x in counts):
        raise InvalidInput(f"composition {counts} is not valid for C={C}")
    W = sum(counts)
    if C == 1:
        return 1.0
    if Mode(mode) is Mode.EXACT_MULTINOMIAL:
        coef = _fact(W)
        for x in counts:
            coef //= _fact(x)
        return coef / C**W
    # sequential binomial stages, each with success probability 1/C over the nodes still unplaced
    p = 1.0
    placed = 0
    for c in range(C - 1):
        res = W - placed
        p *= math.comb(res, counts[c]) * (1 / C) ** counts[c] * ((C - 1) / C) ** (res - counts[c])
        placed += counts[c]
    return p


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def imbalance(comp: Composition | tuple[int, ...], W_tot: int, C: int) -> int:
    """Largest distance of any channel count from the rounded average."""
    avg = round_half_up(W_tot / C)
    return max(abs(x - avg) for x in _counts(comp))


def first_attempt_delay(q: float, Z: int) -> float:
    """Expected period of the first attempt when each period passes silently with probability q."""
    if not 0 <= q <= 1 or Z < 1:
        raise InvalidInput(f"need 0 <= q <= 1 and Z >= 1, got q={q}, Z={Z}")
    if q == 1:
        return float(Z)
    if q == 0:
        return 1.0
    # (1 - q^Z) / (1 - q) without cancellation when q is close to 1
    return -math.expm1(Z * math.log(q)) / -math.expm1(math.log(q)) if q > 0.5 else (1 - q**Z) / (1 - q)


def first_attempt_delay_sum(q: float, Z: int) -> float:
    """The same expectation summed term by term over periods 1..Z."""
    if not 0 <= q <= 1 or Z < 1:
        raise InvalidInput(f"need 0 <= q <= 1 and Z >= 1, got q={q}, Z={Z}")
    terms = [z * q ** (z - 1) * (1 - q) for z in range(1, Z + 1)]
    terms.append(Z * q**Z)
    return math.fsum(terms)


def no_switch_probability(k: int, W_diff: int, params: DelayParams) -> float:
    """Chance that none of the surplus channel's nodes attempts in one period, k-th departure."""
    p = min(params.beta ** (k - 1) * params.p_sw_0, 1.0)
    n = W_diff + params.W_tot // params.C - k + 1
    return (1.0 - p) ** n


def departure_delay(k: int, W_diff: int, params: DelayParams) -> float:
    if not 1 <= k <= W_diff:
        raise InvalidInput(f"k must lie in 1..{W_diff}, got {k}")
    return first_attempt_delay(no_switch_probability(k, W_diff, params), params.Z)


def switching_periods(W_diff: int, params: DelayParams) -> float:
    """Periods spent on the W_diff departures, each followed by two frozen periods."""
    return math.fsum(departure_delay(k, W_diff, params) + 2 for k in range(1, W_diff + 1))


def expected_delay(
    params: DelayParams,
    mode: Mode = Mode.EXACT_MULTINOMIAL,
    limit: int = 10**7,
    keep_terms: bool = False,
) -> DelayEstimate:
    """Expected seconds until balanced occupancy plus the desync settling time."""
    mode = Mode(mode)
    n = composition_count(params.W_tot, params.C)
    if n > limit:
        raise CompositionLimitExceeded(
            f"{n} compositions for W_tot={params.W_tot}, C={params.C} exceed the limit of {limit}; "
            "use sampled_expected_delay"
        )
    cache: dict[int, float] = {}
    acc: list[float] = []
    probs: list[float] = []
    terms: list[CompositionTerm] = []
    for i, counts in enumerate(iter_compositions(params.W_tot, params.C), start=1):
        p = composition_probability(counts, params.C, mode)
        wd = imbalance(counts, params.W_tot, params.C)
        if wd not in cache:
            cache[wd] = switching_periods(wd, params)
        probs.append(p)
        acc.append(p * cache[wd])
        if keep_terms:
            terms.append(CompositionTerm(Composition(counts, i), p, wd, cache[wd]))
    total = params.T * (math.fsum(acc) + params.k_ss)
    return DelayEstimate(total, params, mode, math.fsum(probs), n, False, terms)


def sampled_expected_delay(params: DelayParams, n_samples: int = 100_000, seed: int = 0) -> DelayEstimate:
    """Monte Carlo version for sizes beyond exact enumeration.

    Compositions are drawn by assigning every node a uniform random channel,
    so the weighting is the exact multinomial one.
    """
    rng = np.random.default_rng(seed)
    cache: dict[int, float] = {}
    avg = round_half_up(params.W_tot / params.C)
    total = 0.0
    done = 0
    while done < n_samples:
        m = min(10_000, n_samples - done)
        ch = rng.integers(0, params.C, size=(m, params.W_tot))
        counts = np.stack([(ch == c).sum(axis=1) for c in range(params.C)], axis=1)
        wds = np.abs(counts - avg).max(axis=1)
        for wd in np.unique(wds):
            if int(wd) not in cache:
                cache[int(wd)] = switching_periods(int(wd), params)
        total += sum(cache[int(wd)] for wd in wds)
        done += m
    mean = total / n_samples
    return DelayEstimate(
        params.T * (mean + params.k_ss),
        params,
        Mode.EXACT_MULTINOMIAL,
        1.0,
        composition_count(params.W_tot, params.C),
        sampled=True,
    )


def probability_sum(W_tot: int, C: int, mode: Mode) -> float:
    return math.fsum(composition_probability(c, C, mode) for c in iter_compositions(W_tot, C))


@dataclass(frozen=True)
class FirstAttemptSample:
    mean: float
    sem: float
    n_trials: int


def monte_carlo_first_attempt(n_waiting: int, p: float, Z: int, n_trials: int, seed: int = 0) -> FirstAttemptSample:
    """Sampled period of the first attempt among ``n_waiting`` nodes, forced at period Z."""
    if n_waiting < 1 or Z < 1 or n_trials < 1 or not 0 <= p <= 1:
        raise InvalidInput("need n_waiting >= 1, Z >= 1, n_trials >= 1 and 0 <= p <= 1")
    rng = np.random.default_rng(seed)
    result = np.full(n_trials, Z, dtype=np.int64)
    active = np.arange(n_trials)
    for z in range(1, Z):
        if active.size == 0:
            break
        hit = (rng.random((active.size, n_waiting)) < p).any(axis=1)
        result[active[hit]] = z
        active = active[~hit]
    mean = float(result.mean())
    sem = float(result.std(ddof=1) / math.sqrt(n_trials)) if n_trials > 1 else 0.0
    return FirstAttemptSample(mean, sem, n_trials)
