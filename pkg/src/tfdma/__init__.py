"""Distributed time-frequency division multiple access: simulator and analytic models."""

from .delay import DelayEstimate, DelayParams, Mode, expected_delay
from .desync import DesyncParams, InsufficientHistory, InvalidInput, periods_to_steady_state
from .engine import RunSummary, SimConfig, SimTrace, convergence_time_distribution, run
from .protocol import ProtocolParams
from .stability import build_G, spectral_radius, step_expected

__all__ = [
    "DelayEstimate",
    "DelayParams",
    "DesyncParams",
    "InsufficientHistory",
    "InvalidInput",
    "Mode",
    "ProtocolParams",
    "RunSummary",
    "SimConfig",
    "SimTrace",
    "build_G",
    "convergence_time_distribution",
    "expected_delay",
    "periods_to_steady_state",
    "run",
    "spectral_radius",
    "step_expected",
]
