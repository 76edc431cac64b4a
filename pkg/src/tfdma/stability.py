"""Expected-occupancy (fluid) model of channel switching.

Node counts per channel are treated as reals. Channel ``c`` sends
``min(p_c * W_c, 1)`` nodes to channel ``c + s_c`` whenever it holds at least
two more nodes than that channel. In matrix form ``w' = G w`` with ``G``
column-stochastic: column ``c`` keeps ``1 - g_c`` on the diagonal and puts
``g_c`` on row ``c + s_c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .desync import InvalidInput
from .protocol import max_offset


# slack for the step test so float round-off in w (e.g. W * (1 - 1/W)) does not hide a move
STEP_EPS = 1e-9


def unit_step(x: float) -> int:
    """Heaviside step with ``u(0) = 1``."""
    return 1 if x >= 0 else 0


def wrap(c: int, s: int, C: int) -> int:
    """0-based cyclic channel index ``c + s``."""
    return (c + s) % C


def _check_offsets(s: Sequence[int], C: int) -> None:
    if C < 2:
        return
    for off in s:
        if not 1 <= abs(int(off)) <= max_offset(C):
            raise InvalidInput(f"offset {off} outside ±1..±{max_offset(C)} for C={C}")


@dataclass
class SwitchRates:
    g: np.ndarray
    s: np.ndarray
    p_sw: np.ndarray

    @classmethod
    def from_counts(cls, w: Sequence[float], p_sw: Sequence[float], s: Sequence[int]) -> "SwitchRates":
        """Rates for occupancy ``w`` with the min-clamp folded into ``g``."""
        w = np.asarray(w, dtype=float)
        p = np.asarray(p_sw, dtype=float)
        s = np.asarray(s, dtype=int)
        C = len(w)
        if not (len(p) == len(s) == C):
            raise InvalidInput("w, p_sw and s must have equal length")
        _check_offsets(s, C)
        g = np.zeros(C)
        if C > 1:
            for c in range(C):
                step = unit_step(w[c] - w[wrap(c, s[c], C)] - 2 + STEP_EPS)
                g[c] = step * min(p[c], 1.0 / max(w[c], 1.0))
        return cls(g=g, s=s, p_sw=p)


def build_G(w: Sequence[float], rates: SwitchRates) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    C = len(w)
    _check_offsets(rates.s, C)
    if np.any(rates.g < 0) or np.any(rates.g > 1):
        raise InvalidInput("switch rates must lie in [0, 1]")
    if np.any(rates.g * w > 1 + 1e-12):
        raise InvalidInput("g_c * W_c must not exceed 1")
    G = np.eye(C)
    if C == 1:
        return G
    for c in range(C):
        G[c, c] = 1.0 - rates.g[c]
        G[wrap(c, int(rates.s[c]), C), c] += rates.g[c]
    return G


def step_expected(w: Sequence[float], rates: SwitchRates) -> np.ndarray:
    """One step of the expected occupancy, ``G @ w``."""
    return build_G(w, rates) @ np.asarray(w, dtype=float)


def step_elementwise(w: Sequence[float], p_sw: Sequence[float], s: Sequence[int]) -> np.ndarray:
    """The same step evaluated per channel as outflow and summed inflows."""
    w = [float(x) for x in w]
    C = len(w)
    if C == 1:
        return np.array(w)
    out = list(w)
    for c in range(C):
        t = wrap(c, int(s[c]), C)
        moved = min(unit_step(w[c] - 2 - w[t] + STEP_EPS) * p_sw[c] * w[c], 1.0)
        out[c] -= moved
        out[t] += moved
    return np.array(out)


def spectral_radius(G: np.ndarray) -> float:
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise InvalidInput("matrix has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(G))))


def is_fixed_point(w: Sequence[float], W_tot: int, C: int) -> bool:
    """Whether ``w`` is a balanced occupancy: every entry is floor or ceil of W_tot / C."""
    if len(w) != C:
        return False
    ints = [round(float(x)) for x in w]
    if any(abs(float(x) - n) > 1e-9 for x, n in zip(w, ints)) or sum(ints) != W_tot:
        return False
    lo, hi = W_tot // C, -(-W_tot // C)
    return all(lo <= n <= hi for n in ints)


def round_occupancy(w: Sequence[float]) -> list[int]:
    """Nearest integer occupancy with the same total (largest remainder)."""
    total = round(math.fsum(w))
    floors = [math.floor(x + 1e-9) for x in w]
    rem = sorted(range(len(w)), key=lambda c: (-(w[c] - floors[c]), c))
    for c in rem[: total - sum(floors)]:
        floors[c] += 1
    return floors


def spread(w: Sequence[float]) -> float:
    return float(max(w) - min(w))


def offset_cycle(C: int) -> list[int]:
    """Offsets in scan order: +1, -1, +2, -2, ... without duplicates."""
    out: list[int] = []
    for m in range(1, max_offset(C) + 1):
        for off in (m, -m):
            if off % C not in {o % C for o in out}:
                out.append(off)
    return out


def iterate_expected(
    w0: Sequence[float],
    p_sw: float | Sequence[float] = 1.0,
    max_steps: int = 10_000,
) -> list[np.ndarray]:
    """Trajectory of the fluid model until no channel can move any more.

    All channels share one offset per step, so every channel has exactly one
    possible source. The shared offset advances through ``offset_cycle``
    whenever a step moves nothing, mirroring the direction scan a channel
    performs after a returned attempt.
    """
    w = np.asarray(w0, dtype=float)
    C = len(w)
    p = np.broadcast_to(np.asarray(p_sw, dtype=float), (C,))
    traj = [w.copy()]
    if C == 1:
        return traj
    cycle = offset_cycle(C)
    idx = 0
    idle = 0
    for _ in range(max_steps):
        if spread(w) < 2 or idle >= len(cycle):
            break
        rates = SwitchRates.from_counts(w, p, [cycle[idx]] * C)
        if not rates.g.any():
            idx = (idx + 1) % len(cycle)
            idle += 1
            continue
        idle = 0
        w = step_expected(w, rates)
        traj.append(w.copy())
    return traj
