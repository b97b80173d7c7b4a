"""Stopping policies for iterative solvers on sketched least-squares problems.

Four modes are provided:

* ``TRADITIONAL`` -- the classical tolerance test on the sketched system,
  ||(SA)^T S r_k|| / (||SA|| ||S r_k||) <= tol.
* ``EPSILON_THRESHOLD`` -- terminate once the unsketched normal-equation ratio
  ||A^T r_k|| / (||A|| ||r_k||) falls below a known embedding parameter
  (oracle runs only; the parameter is not available in production).
* ``STABILIZE_NORMAL_RATIO`` -- fire when the windowed endpoint geometric mean
  of the unsketched normal-equation ratio enters a band around one
  (recommended for LSMR).
* ``STABILIZE_RESIDUAL`` -- the same rule on the unsketched residual norm
  (recommended for LSQR).

The stabilization rules detect the plateau where further iterations on the
sketched problem stop improving the original problem, without needing any
estimate of the embedding quality.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

from .solvers import IterateRecord, Termination


class StopMode(str, enum.Enum):
    TRADITIONAL = "traditional"
    EPSILON_THRESHOLD = "eps"
    STABILIZE_NORMAL_RATIO = "stab-ne"
    STABILIZE_RESIDUAL = "stab-res"


_TERMINATION_OF = {
    StopMode.TRADITIONAL: Termination.TOLERANCE_MET,
    StopMode.EPSILON_THRESHOLD: Termination.TOLERANCE_MET,
    StopMode.STABILIZE_NORMAL_RATIO: Termination.STABILIZED_NORMAL_RATIO,
    StopMode.STABILIZE_RESIDUAL: Termination.STABILIZED_RESIDUAL,
}


@dataclass
class StoppingPolicy:
    mode: StopMode
    tol: float = 0.0
    window: int = 5
    band: Tuple[float, float] = (0.99, 1.01)
    max_iter: int = 0

    def __post_init__(self):
        self.mode = StopMode(self.mode)
        lo, hi = self.band
        if not (0.0 < lo <= 1.0 <= hi):
            raise ValueError(f"band must satisfy 0 < lo <= 1 <= hi, got {self.band}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.tol < 0.0:
            raise ValueError("tol must be nonnegative")


def traditional_decision(record: IterateRecord, tol: float, op_norm: float) -> bool:
    """Tolerance test on the sketched system's normal-equation ratio."""
    if record.sketched_residual_norm == 0.0:
        return True
    ratio = record.sketched_normal_residual_norm / (op_norm * record.sketched_residual_norm)
    return ratio <= tol


def epsilon_threshold_decision(record: IterateRecord, epsilon: float) -> bool:
    """Unsketched normal-equation ratio against a known embedding parameter.

    A stale record defers the decision to the next fresh evaluation.
    """
    if record.stale:
        return False
    return record.unsketched_normal_ratio <= epsilon


def stabilization_decision(history: Iterable[float], band: Tuple[float, float]) -> bool:
    """Endpoint geometric-mean test on a window of metric values.

    ``history`` holds values v_k .. v_{k+l}; the decision is
    (v_{k+l} / v_k)^(1/l) in [lo, hi].  Shorter histories are undecided.
    """
    values = list(history)
    if len(values) < 2:
        return False
    if any(v <= 0.0 for v in values):
        raise ValueError("stabilization metrics must be positive")
    ell = len(values) - 1
    g = (values[-1] / values[0]) ** (1.0 / ell)
    lo, hi = band
    return lo <= g <= hi


def recommend_policy(solver: str) -> StopMode:
    """Preferred stabilization metric per solver: LSMR watches the
    normal-equation ratio, LSQR the residual norm."""
    name = solver.lower()
    if name == "lsmr":
        return StopMode.STABILIZE_NORMAL_RATIO
    if name == "lsqr":
        return StopMode.STABILIZE_RESIDUAL
    raise ValueError(f"unknown solver '{solver}'")


class StoppingController:
    """Per-run evaluation state for a :class:`StoppingPolicy`.

    Feed one :class:`IterateRecord` per iteration; the controller returns the
    matching :class:`Termination` at the first iteration whose decision holds
    and records the window start in ``fired_at``.  Stabilization windows use
    fresh metric values only, so under an observer stride > 1 the effective
    window spans stride * window iterations.

    ``use_x_norm_metric`` switches the normal-ratio stabilization metric to
    the iterate-norm variant ||A^T A x|| / ||x|| for comparison purposes.
    ``persistence`` requires that many consecutive satisfying windows before
    firing (default 1: fire on first entry into the band).
    """

    def __init__(self, policy: StoppingPolicy, op_norm: float = math.nan,
                 epsilon: float = math.nan, use_x_norm_metric: bool = False,
                 persistence: int = 1):
        self.policy = policy
        self.op_norm = op_norm
        self.epsilon = epsilon
        self.use_x_norm_metric = use_x_norm_metric
        self.persistence = persistence
        self.fired_at: Optional[int] = None
        self._buffer: deque = deque(maxlen=policy.window + 1)
        self._satisfied = 0
        if policy.mode is StopMode.TRADITIONAL and math.isnan(op_norm):
            raise ValueError("traditional policy needs the sketched operator norm")
        if policy.mode is StopMode.EPSILON_THRESHOLD and math.isnan(epsilon):
            raise ValueError("epsilon-threshold policy needs the embedding parameter")

    def _metric(self, record: IterateRecord) -> float:
        if self.policy.mode is StopMode.STABILIZE_RESIDUAL:
            return record.unsketched_residual_norm
        if self.use_x_norm_metric:
            return record.atx_norm / record.x_norm if record.x_norm > 0 else math.nan
        return record.unsketched_normal_ratio

    def feed(self, record: IterateRecord) -> Optional[Termination]:
        mode = self.policy.mode
        if mode is StopMode.TRADITIONAL:
            if traditional_decision(record, self.policy.tol, self.op_norm):
                self.fired_at = record.k
                return _TERMINATION_OF[mode]
            return None
        if mode is StopMode.EPSILON_THRESHOLD:
            if epsilon_threshold_decision(record, self.epsilon):
                self.fired_at = record.k
                return _TERMINATION_OF[mode]
            return None
        if record.stale:
            return None
        value = self._metric(record)
        if math.isnan(value):
            return None
        self._buffer.append((record.k, value))
        if len(self._buffer) < self.policy.window + 1:
            return None
        if stabilization_decision([v for _, v in self._buffer], self.policy.band):
            self._satisfied += 1
            if self._satisfied >= self.persistence:
                self.fired_at = self._buffer[0][0]
                return _TERMINATION_OF[mode]
        else:
            self._satisfied = 0
        return None


def first_stabilization(values: List[float], window: int = 5,
                        band: Tuple[float, float] = (0.99, 1.01)) -> Optional[int]:
    """Offline scan: smallest index k whose window [k, k+window] is in band.

    Indices refer to positions in ``values``; equals the online controller's
    ``fired_at`` on the same series.
    """
    for k in range(len(values) - window):
        if stabilization_decision(values[k:k + window + 1], band):
            return k
    return None
