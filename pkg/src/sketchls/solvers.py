"""LSQR and LSMR over an abstract linear operator, with per-iterate observers.

Both solvers follow the Golub-Kahan bidiagonalization recurrences of Paige &
Saunders (LSQR) and Fong & Saunders (LSMR).  The recurrences supply cheap
estimates of the operator-space residual norm ||Op x - rhs|| and of the
normal-equation residual norm ||Op^T (Op x - rhs)||; an observer callback can
augment every iterate with explicitly computed metrics on the unsketched
problem, which is what the stabilization stopping policies monitor.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse

from .matio import MatrixHandle


@dataclass
class LinearOperatorView:
    rows: int
    cols: int
    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, M) -> "LinearOperatorView":
        if isinstance(M, MatrixHandle):
            return cls(M.rows, M.cols, M.matvec, M.rmatvec)
        rows, cols = M.shape
        if scipy.sparse.issparse(M):
            return cls(rows, cols, lambda v: M @ v, lambda u: M.T @ u)
        M = np.asarray(M, dtype=np.float64)
        return cls(rows, cols, lambda v: M @ v, lambda u: M.T @ u)


def adjoint_mismatch(op: LinearOperatorView, op_norm: float, probes: int = 5,
                     seed: int = 0) -> float:
    """Worst relative <u, Op v> vs <Op^T u, v> discrepancy over random probes."""
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 77], dtype=np.uint64)))
    worst = 0.0
    for _ in range(probes):
        u = gen.standard_normal(op.rows)
        v = gen.standard_normal(op.cols)
        gap = abs(u @ op.forward(v) - op.adjoint(u) @ v)
        worst = max(worst, gap / (np.linalg.norm(u) * np.linalg.norm(v) * op_norm))
    return worst


class Termination(enum.Enum):
    STABILIZED_NORMAL_RATIO = "stabilized_normal_ratio"
    STABILIZED_RESIDUAL = "stabilized_residual"
    TOLERANCE_MET = "tolerance_met"
    MAX_ITERATIONS = "max_iterations"
    BREAKDOWN = "breakdown"


@dataclass
class IterateRecord:
    k: int
    sketched_residual_norm: float
    sketched_normal_residual_norm: float
    unsketched_residual_norm: float = math.nan
    unsketched_normal_ratio: float = math.nan
    stale: bool = True
    x_norm: float = math.nan
    atx_norm: float = math.nan
    x_snapshot: Optional[np.ndarray] = None


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    termination: Termination
    trace: List[IterateRecord] = field(default_factory=list)


class MetricsObserver:
    """Populates iterate records with explicitly computed unsketched metrics.

    Every ``stride``-th iteration pays two matrix-vector products with A to
    evaluate r = A x - b and A^T r; off-stride iterations carry the last fresh
    values forward with the stale flag set.
    """

    def __init__(self, A: MatrixHandle, b: np.ndarray, stride: int = 1,
                 keep_snapshots: bool = False, track_x_metrics: bool = False):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.A = A
        self.b = np.asarray(b, dtype=np.float64)
        self.stride = stride
        self.keep_snapshots = keep_snapshots
        self.track_x_metrics = track_x_metrics
        self.norm_A = A.spectral_norm()
        self._last_rnorm = math.nan
        self._last_ratio = math.nan
        self._last_xnorm = math.nan
        self._last_atxnorm = math.nan

    def __call__(self, k: int, x: np.ndarray, srnorm: float, snenorm: float) -> IterateRecord:
        fresh = (k - 1) % self.stride == 0
        if fresh:
            r = self.A.matvec(x) - self.b
            rnorm = float(np.linalg.norm(r))
            ne = float(np.linalg.norm(self.A.rmatvec(r)))
            self._last_rnorm = rnorm
            self._last_ratio = ne / (self.norm_A * rnorm) if rnorm > 0 else 0.0
            if self.track_x_metrics:
                # nearest well-typed completion of the iterate-norm stopping
                # variant: A^T applied to the image of x
                self._last_xnorm = float(np.linalg.norm(x))
                self._last_atxnorm = float(np.linalg.norm(self.A.rmatvec(self.A.matvec(x))))
        return IterateRecord(
            k=k,
            sketched_residual_norm=srnorm,
            sketched_normal_residual_norm=snenorm,
            unsketched_residual_norm=self._last_rnorm,
            unsketched_normal_ratio=self._last_ratio,
            stale=not fresh,
            x_norm=self._last_xnorm,
            atx_norm=self._last_atxnorm,
            x_snapshot=x.copy() if self.keep_snapshots else None,
        )


def _default_observer(k: int, x: np.ndarray, srnorm: float, snenorm: float) -> IterateRecord:
    return IterateRecord(k=k, sketched_residual_norm=srnorm,
                         sketched_normal_residual_norm=snenorm)


def _sym_ortho(a: float, b: float):
    """Stable Givens rotation (c, s, r) with r = hypot(a, b)."""
    if b == 0.0:
        return math.copysign(1.0, a), 0.0, abs(a)
    if a == 0.0:
        return 0.0, math.copysign(1.0, b), abs(b)
    if abs(b) > abs(a):
        tau = a / b
        s = math.copysign(1.0, b) / math.sqrt(1.0 + tau * tau)
        return s * tau, s, b / s
    tau = b / a
    c = math.copysign(1.0, a) / math.sqrt(1.0 + tau * tau)
    return c, c * tau, a / c


class _Reorth:
    """Full reorthogonalization buffers for the debug switch."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.us: List[np.ndarray] = []
        self.vs: List[np.ndarray] = []

    def against(self, basis: List[np.ndarray], w: np.ndarray) -> np.ndarray:
        if not self.enabled or not basis:
            return w
        B = np.array(basis)
        for _ in range(2):
            w = w - B.T @ (B @ w)
        return w


def _resolve_max_iter(op: LinearOperatorView, max_iter: Optional[int], stop) -> int:
    if max_iter is not None:
        return max_iter
    if stop is not None and getattr(stop, "max_iter", 0):
        return stop.max_iter
    return min(2 * op.cols, op.rows)


# A bidiagonalization coefficient this far below the accumulated operator-norm
# estimate means the Krylov space is exhausted (exact convergence); continuing
# would normalize rounding noise and corrupt the iterate.
BREAKDOWN_RTOL = 1e-12


def lsqr(op: LinearOperatorView, rhs: np.ndarray, observer=None, stop=None,
         max_iter: Optional[int] = None, reorthogonalize: bool = False) -> SolveResult:
    """LSQR on min ||op x - rhs||; the k-th iterate minimizes the residual
    over the k-th Krylov subspace of (op^T op, op^T rhs).

    The recurrence value ``phibar`` estimates ||op x_k - rhs|| and is
    nonincreasing by construction; ``phibar * alpha * |c|`` estimates
    ||op^T (op x_k - rhs)||.  ``stop`` is fed one record per iteration and may
    end the run; breakdown of the bidiagonalization (alpha or beta reaching
    zero) returns the last iterate.
    """
    observer = observer or _default_observer
    max_iter = _resolve_max_iter(op, max_iter, stop)
    reo = _Reorth(reorthogonalize)

    x = np.zeros(op.cols)
    u = np.asarray(rhs, dtype=np.float64).copy()
    beta = float(np.linalg.norm(u))
    if beta == 0.0:
        return SolveResult(x=x, iterations=0, termination=Termination.BREAKDOWN)
    u /= beta
    v = op.adjoint(u)
    alpha = float(np.linalg.norm(v))
    if alpha == 0.0:
        return SolveResult(x=x, iterations=0, termination=Termination.BREAKDOWN)
    v /= alpha
    if reo.enabled:
        reo.us.append(u.copy())
        reo.vs.append(v.copy())
    w = v.copy()
    phibar = beta
    rhobar = alpha
    norm_est_sq = alpha * alpha

    trace: List[IterateRecord] = []
    termination = Termination.MAX_ITERATIONS
    iterations = 0
    for k in range(1, max_iter + 1):
        u = op.forward(v) - alpha * u
        u = reo.against(reo.us, u)
        beta = float(np.linalg.norm(u))
        if beta > 0.0:
            u /= beta
            if reo.enabled:
                reo.us.append(u.copy())
        v = op.adjoint(u) - beta * v
        v = reo.against(reo.vs, v)
        alpha = float(np.linalg.norm(v))
        if alpha > 0.0:
            v /= alpha
            if reo.enabled:
                reo.vs.append(v.copy())
        norm_est_sq += alpha * alpha + beta * beta
        floor = BREAKDOWN_RTOL * math.sqrt(norm_est_sq)

        c, s, rho = _sym_ortho(rhobar, beta)
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar
        x += (phi / rho) * w
        w = v - (theta / rho) * w

        srnorm = phibar
        snenorm = phibar * alpha * abs(c)
        record = observer(k, x, srnorm, snenorm)
        trace.append(record)
        iterations = k
        if stop is not None:
            fired = stop.feed(record)
            if fired is not None:
                termination = fired
                break
        if beta <= floor or alpha <= floor:
            termination = Termination.BREAKDOWN
            break
    return SolveResult(x=x, iterations=iterations, termination=termination, trace=trace)


def lsmr(op: LinearOperatorView, rhs: np.ndarray, observer=None, stop=None,
         max_iter: Optional[int] = None, reorthogonalize: bool = False) -> SolveResult:
    """LSMR on min ||op x - rhs||; the k-th iterate minimizes the
    normal-equation residual ||op^T (op x - rhs)|| over the same Krylov
    subspace as LSQR, so that estimate (``|zetabar|``) is nonincreasing.

    The operator-space residual norm is tracked by the Fong-Saunders
    recurrence.  Contracts (observer, stop, breakdown) match :func:`lsqr`.
    """
    observer = observer or _default_observer
    max_iter = _resolve_max_iter(op, max_iter, stop)
    reo = _Reorth(reorthogonalize)

    x = np.zeros(op.cols)
    u = np.asarray(rhs, dtype=np.float64).copy()
    beta = float(np.linalg.norm(u))
    if beta == 0.0:
        return SolveResult(x=x, iterations=0, termination=Termination.BREAKDOWN)
    u /= beta
    v = op.adjoint(u)
    alpha = float(np.linalg.norm(v))
    if alpha == 0.0:
        return SolveResult(x=x, iterations=0, termination=Termination.BREAKDOWN)
    v /= alpha
    if reo.enabled:
        reo.us.append(u.copy())
        reo.vs.append(v.copy())

    zetabar = alpha * beta
    alphabar = alpha
    rho = 1.0
    rhobar = 1.0
    cbar = 1.0
    sbar = 0.0
    h = v.copy()
    hbar = np.zeros(op.cols)

    # residual-norm recurrence state
    betadd = beta
    betad = 0.0
    rhodold = 1.0
    tautildeold = 0.0
    thetatilde = 0.0
    zeta = 0.0
    norm_est_sq = alpha * alpha

    trace: List[IterateRecord] = []
    termination = Termination.MAX_ITERATIONS
    iterations = 0
    for k in range(1, max_iter + 1):
        u = op.forward(v) - alpha * u
        u = reo.against(reo.us, u)
        beta = float(np.linalg.norm(u))
        if beta > 0.0:
            u /= beta
            if reo.enabled:
                reo.us.append(u.copy())
        v = op.adjoint(u) - beta * v
        v = reo.against(reo.vs, v)
        alpha = float(np.linalg.norm(v))
        if alpha > 0.0:
            v /= alpha
            if reo.enabled:
                reo.vs.append(v.copy())
        norm_est_sq += alpha * alpha + beta * beta
        floor = BREAKDOWN_RTOL * math.sqrt(norm_est_sq)

        # rotate the bidiagonal factor
        rhoold = rho
        c, s, rho = _sym_ortho(alphabar, beta)
        thetanew = s * alpha
        alphabar = c * alpha

        rhobarold = rhobar
        zetaold = zeta
        thetabar = sbar * rho
        rhotemp = cbar * rho
        cbar, sbar, rhobar = _sym_ortho(rhotemp, thetanew)
        zeta = cbar * zetabar
        zetabar = -sbar * zetabar

        hbar = h - (thetabar * rho / (rhoold * rhobarold)) * hbar
        x += (zeta / (rho * rhobar)) * hbar
        h = v - (thetanew / rho) * h

        # residual-norm estimate (undamped Fong-Saunders recurrence)
        betahat = c * betadd
        betadd = -s * betadd
        thetatildeold = thetatilde
        ctildeold, stildeold, rhotildeold = _sym_ortho(rhodold, thetabar)
        thetatilde = stildeold * rhobar
        rhodold = ctildeold * rhobar
        betad = -stildeold * betad + ctildeold * betahat
        tautildeold = (zetaold - thetatildeold * tautildeold) / rhotildeold
        taud = (zeta - thetatilde * tautildeold) / rhodold
        srnorm = math.sqrt((betad - taud) ** 2 + betadd ** 2)
        snenorm = abs(zetabar)

        record = observer(k, x, srnorm, snenorm)
        trace.append(record)
        iterations = k
        if stop is not None:
            fired = stop.feed(record)
            if fired is not None:
                termination = fired
                break
        if beta <= floor or alpha <= floor:
            termination = Termination.BREAKDOWN
            break
    return SolveResult(x=x, iterations=iterations, termination=termination, trace=trace)


TRACE_COLUMNS = ["k", "srnorm", "snenorm", "rnorm", "ne_ratio", "stale_flag"]


def write_trace(path, trace: List[IterateRecord]) -> None:
    """One CSV row per iteration with deterministic float formatting."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace:
            writer.writerow([
                rec.k,
                f"{rec.sketched_residual_norm:.17g}",
                f"{rec.sketched_normal_residual_norm:.17g}",
                f"{rec.unsketched_residual_norm:.17g}",
                f"{rec.unsketched_normal_ratio:.17g}",
                int(rec.stale),
            ])


def read_trace(path) -> List[dict]:
    with open(path, "r", newline="", encoding="ascii") as fh:
        return list(csv.DictReader(fh))
