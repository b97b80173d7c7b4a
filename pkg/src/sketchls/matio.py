"""Matrix storage, Matrix Market I/O, and synthesis of least-squares test problems.

A :class:`MatrixHandle` wraps either a dense array or a CSR sparse matrix and
lazily caches its extreme singular values.  Problems are synthesized by the
recipe b = A*x - r with r a scaled random direction, and an exact least-squares
oracle (dense pivoted QR plus one refinement step) supplies reference solutions
for all bound checks.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse

from .rng import stream


class MatrixMarketError(ValueError):
    """Malformed Matrix Market input; message carries the offending line number."""


class RankDeficiencyError(ValueError):
    """The matrix is numerically rank deficient for the requested operation."""


DESK_SCALE_COLS = 10_000


@dataclass
class SpectralInfo:
    norm: float
    sigma_min: float
    cond: float
    power_iterations: int
    power_converged: bool


class MatrixHandle:
    """Immutable dense or CSR matrix with cached spectral data.

    The handle is safe to share across threads: the payload is never mutated
    after construction, and the spectral cache is written once under a lock so
    concurrent readers observe either no value or the final one.
    """

    def __init__(self, data):
        if scipy.sparse.issparse(data):
            mat = data.tocsr().astype(np.float64)
            mat.sum_duplicates()
            mat.eliminate_zeros()
            mat.sort_indices()
            self._sparse: Optional[scipy.sparse.csr_matrix] = mat
            self._dense: Optional[np.ndarray] = None
            rows, cols = mat.shape
        else:
            arr = np.asarray(data, dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError("matrix data must be two-dimensional")
            self._sparse = None
            self._dense = np.asfortranarray(arr)
            rows, cols = arr.shape
        if rows < 1 or cols < 1:
            raise ValueError("empty matrix")
        if rows < cols:
            raise ValueError(f"problem matrices must be tall or square, got {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        self._spectral: Optional[SpectralInfo] = None
        self._lock = threading.Lock()

    @property
    def is_sparse(self) -> bool:
        return self._sparse is not None

    @property
    def nnz(self) -> int:
        if self._sparse is not None:
            return int(self._sparse.nnz)
        return int(np.count_nonzero(self._dense))

    def dense(self) -> np.ndarray:
        """Dense view of the matrix (materialized on demand for CSR storage)."""
        if self._dense is None:
            return self._sparse.toarray()
        return self._dense

    def csr(self) -> scipy.sparse.csr_matrix:
        if self._sparse is None:
            return scipy.sparse.csr_matrix(self._dense)
        return self._sparse

    def matvec(self, x: np.ndarray) -> np.ndarray:
        mat = self._sparse if self._sparse is not None else self._dense
        return mat @ x

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        mat = self._sparse if self._sparse is not None else self._dense
        return mat.T @ y

    def spectral(self) -> SpectralInfo:
        """Cached (norm, sigma_min, cond); computed on first access."""
        info = self._spectral
        if info is None:
            info = spectral_norms(self)
        return info

    def spectral_norm(self) -> float:
        return self.spectral().norm


@dataclass
class ProblemTruth:
    x_ls: np.ndarray
    r_ls: np.ndarray
    r_ls_norm: float


@dataclass
class ProblemInstance:
    A: MatrixHandle
    b: np.ndarray
    truth: Optional[ProblemTruth]
    seed: int


@dataclass
class LsOracle:
    x_ls: np.ndarray
    r_ls: np.ndarray
    r_ls_norm: float
    normal_eq_residual: float


# ---------------------------------------------------------------------------
# Matrix Market I/O

_MM_HEADER = "%%MatrixMarket"


def load_matrix_market(path) -> MatrixHandle:
    """Parse a Matrix Market file (coordinate or array, real, general/symmetric).

    Indices are 1-based on disk and 0-based in memory; symmetric storage is
    expanded to full.  Raises :class:`MatrixMarketError` with the line number
    on any malformed content; complex and pattern fields are rejected.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.readlines()
    if not lines:
        raise MatrixMarketError("line 1: empty file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != _MM_HEADER or header[1].lower() != "matrix":
        raise MatrixMarketError("line 1: expected '%%MatrixMarket matrix <format> <field> <symmetry>'")
    fmt, fieldkind, symmetry = (w.lower() for w in header[2:5])
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(f"line 1: unsupported format '{fmt}'")
    if fieldkind not in ("real", "integer"):
        raise MatrixMarketError(f"line 1: unsupported field '{fieldkind}' (only real-valued matrices)")
    if symmetry not in ("general", "symmetric"):
        raise MatrixMarketError(f"line 1: unsupported symmetry '{symmetry}'")

    lineno = 1
    body = []
    for raw in lines[1:]:
        lineno += 1
        text = raw.strip()
        if not text or text.startswith("%"):
            continue
        body.append((lineno, text))
    if not body:
        raise MatrixMarketError(f"line {lineno}: missing size line")

    size_lineno, size_line = body[0]
    entries = body[1:]
    parts = size_line.split()

    if fmt == "coordinate":
        if len(parts) != 3:
            raise MatrixMarketError(f"line {size_lineno}: coordinate size line needs 'rows cols nnz'")
        try:
            m, n, nnz = (int(p) for p in parts)
        except ValueError:
            raise MatrixMarketError(f"line {size_lineno}: non-integer size entry") from None
        if m < 1 or n < 1 or nnz < 1:
            raise MatrixMarketError(f"line {size_lineno}: empty matrix rejected")
        if len(entries) != nnz:
            raise MatrixMarketError(
                f"line {size_lineno}: declared {nnz} entries, found {len(entries)}")
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        for k, (ln, text) in enumerate(entries):
            toks = text.split()
            if len(toks) != 3:
                raise MatrixMarketError(f"line {ln}: expected 'row col value'")
            try:
                i, j = int(toks[0]), int(toks[1])
                v = float(toks[2])
            except ValueError:
                raise MatrixMarketError(f"line {ln}: malformed entry") from None
            if not (1 <= i <= m and 1 <= j <= n):
                raise MatrixMarketError(f"line {ln}: index ({i},{j}) out of bounds")
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
        if symmetry == "symmetric":
            if m != n:
                raise MatrixMarketError(f"line {size_lineno}: symmetric matrix must be square")
            off = rows != cols
            rows, cols = (np.concatenate([rows, cols[off]]),
                          np.concatenate([cols, rows[off]]))
            vals = np.concatenate([vals, vals[off]])
        mat = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
        return MatrixHandle(mat)

    # array format: dense column-major values
    if len(parts) != 2:
        raise MatrixMarketError(f"line {size_lineno}: array size line needs 'rows cols'")
    try:
        m, n = int(parts[0]), int(parts[1])
    except ValueError:
        raise MatrixMarketError(f"line {size_lineno}: non-integer size entry") from None
    if m < 1 or n < 1:
        raise MatrixMarketError(f"line {size_lineno}: empty matrix rejected")
    if symmetry == "symmetric" and m != n:
        raise MatrixMarketError(f"line {size_lineno}: symmetric matrix must be square")
    expected = m * n if symmetry == "general" else m * (m + 1) // 2
    if len(entries) != expected:
        raise MatrixMarketError(
            f"line {size_lineno}: declared {expected} values, found {len(entries)}")
    vals = np.empty(expected)
    for k, (ln, text) in enumerate(entries):
        toks = text.split()
        if len(toks) != 1:
            raise MatrixMarketError(f"line {ln}: expected a single value")
        try:
            vals[k] = float(toks[0])
        except ValueError:
            raise MatrixMarketError(f"line {ln}: malformed value") from None
    dense = np.zeros((m, n))
    if symmetry == "general":
        dense = vals.reshape((m, n), order="F")
    else:
        k = 0
        for j in range(n):
            for i in range(j, m):
                dense[i, j] = vals[k]
                dense[j, i] = vals[k]
                k += 1
    return MatrixHandle(dense)


def save_matrix_market(handle: MatrixHandle, path) -> None:
    """Write the handle in general Matrix Market form, round-trip exact."""
    with open(path, "w", encoding="ascii") as fh:
        if handle.is_sparse:
            mat = handle.csr().tocoo()
            fh.write("%%MatrixMarket matrix coordinate real general\n")
            fh.write(f"{handle.rows} {handle.cols} {mat.nnz}\n")
            for i, j, v in zip(mat.row, mat.col, mat.data):
                fh.write(f"{i + 1} {j + 1} {v:.17g}\n")
        else:
            fh.write("%%MatrixMarket matrix array real general\n")
            fh.write(f"{handle.rows} {handle.cols}\n")
            for v in handle.dense().flatten(order="F"):
                fh.write(f"{v:.17g}\n")


def save_vector(path, v: np.ndarray) -> None:
    """Plain-text vector export, one value per line, scientific notation with
    17 significant digits (round-trip exact for doubles)."""
    with open(path, "w", encoding="ascii") as fh:
        for x in np.asarray(v, dtype=np.float64):
            fh.write(f"{x:.16e}\n")


def load_vector(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        return np.array([float(line) for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# Problem synthesis

def synthesize_problem(A: MatrixHandle, seed: int, residual_scale: float = 1e-3) -> ProblemInstance:
    """Construct b = A*x - r with x, t standard normal and r = scale * t/||t||.

    The constructed residual has norm exactly ``residual_scale`` up to rounding
    but is not orthogonal to range(A); reference solutions must come from
    :func:`solve_ls_oracle`.
    """
    if residual_scale <= 0:
        raise ValueError("residual_scale must be positive")
    x_ls = stream(seed, "problem", "x").standard_normal(A.cols)
    gen_t = stream(seed, "problem", "t")
    t = gen_t.standard_normal(A.rows)
    if np.linalg.norm(t) == 0.0:
        t = gen_t.standard_normal(A.rows)
        if np.linalg.norm(t) == 0.0:
            raise ValueError("degenerate residual direction")
    r_ls = residual_scale * t / np.linalg.norm(t)
    b = A.matvec(x_ls) - r_ls
    truth = ProblemTruth(x_ls=x_ls, r_ls=r_ls, r_ls_norm=float(np.linalg.norm(r_ls)))
    return ProblemInstance(A=A, b=b, truth=truth, seed=seed)


def synthesize_matrix(m: int, n: int, cond: float, seed: int) -> MatrixHandle:
    """Random dense m-by-n matrix with prescribed condition number.

    Built as U diag(s) V^T with orthonormal factors and log-spaced singular
    values from 1 down to 1/cond.
    """
    if m < n or n < 1:
        raise ValueError("need m >= n >= 1")
    if cond < 1:
        raise ValueError("cond must be >= 1")
    gen = stream(seed, "synthmat", m, n)
    U = np.linalg.qr(gen.standard_normal((m, n)))[0]
    V = np.linalg.qr(gen.standard_normal((n, n)))[0]
    s = np.logspace(0.0, -math.log10(cond), n) if n > 1 else np.array([1.0])
    return MatrixHandle((U * s) @ V.T)


# ---------------------------------------------------------------------------
# Exact oracle and spectral data

def qr_ls_solve(M: np.ndarray, rhs: np.ndarray, refine: int = 1) -> np.ndarray:
    """Least-squares solve of a dense tall matrix by column-pivoted QR.

    One step of residual refinement (default) pushes the normal-equation
    residual of the computed solution to near machine precision.  Raises
    :class:`RankDeficiencyError` when the R diagonal collapses.
    """
    M = np.asarray(M, dtype=np.float64)
    Q, R, piv = scipy.linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = diag.max() if diag.size else 0.0
    if scale == 0.0 or diag.min() < 1e-12 * scale:
        raise RankDeficiencyError(
            f"rank deficiency: smallest R diagonal {diag.min():.3e} vs scale {scale:.3e}")

    def solve_once(v):
        y = scipy.linalg.solve_triangular(R, Q.T @ v, lower=False)
        x = np.empty_like(y)
        x[piv] = y
        return x

    x = solve_once(rhs)
    for _ in range(refine):
        x = x + solve_once(rhs - M @ x)
    return x


def solve_ls_oracle(A: MatrixHandle, b: np.ndarray) -> LsOracle:
    """Exact least-squares reference solution at desk scale.

    Dense column-pivoted QR of A with one refinement step; the returned
    residual satisfies ||A^T r|| / (||A|| ||r||) <= 1e-10.
    """
    if A.cols > DESK_SCALE_COLS:
        raise ValueError(f"oracle guard: n = {A.cols} exceeds {DESK_SCALE_COLS}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (A.rows,):
        raise ValueError("right-hand side length mismatch")
    x = qr_ls_solve(A.dense(), b)
    r = A.matvec(x) - b
    return LsOracle(
        x_ls=x,
        r_ls=r,
        r_ls_norm=float(np.linalg.norm(r)),
        normal_eq_residual=float(np.linalg.norm(A.rmatvec(r))),
    )


POWER_TOL = 1e-10
POWER_MAX_ITER = 500
SVD_CROSS_CHECK_COLS = 5000


def spectral_norms(A: MatrixHandle) -> SpectralInfo:
    """Largest/smallest singular values and condition number, cached on A.

    The spectral norm comes from power iteration on A^T A (deterministic start
    vector) cross-checked against the SVD of the triangular QR factor whenever
    n is small enough; sigma_min always comes from that SVD.
    """
    if A._spectral is not None:
        return A._spectral

    gen = stream(0, "power", A.rows, A.cols)
    v = gen.standard_normal(A.cols)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, POWER_MAX_ITER + 1):
        w = A.rmatvec(A.matvec(v))
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            break
        v = w / lam
        if abs(lam - lam_prev) <= POWER_TOL * lam:
            converged = True
            break
        lam_prev = lam
    norm_power = math.sqrt(lam) if lam > 0 else 0.0

    norm = norm_power
    sigma_min = 0.0
    if A.cols <= SVD_CROSS_CHECK_COLS:
        R = scipy.linalg.qr(A.dense(), mode="r")[0][: A.cols, :]
        sv = scipy.linalg.svd(R, compute_uv=False)
        sigma_min = float(sv[-1])
        # the dense factorization is the authoritative value; the power
        # estimate only validates it
        norm = float(sv[0])
    if sigma_min < 1e-14 * norm:
        raise RankDeficiencyError(
            f"numerical rank deficiency: sigma_min = {sigma_min:.3e}, norm = {norm:.3e}")

    info = SpectralInfo(
        norm=norm,
        sigma_min=sigma_min,
        cond=norm / sigma_min if sigma_min > 0 else float("inf"),
        power_iterations=iterations,
        power_converged=converged,
    )
    with A._lock:
        if A._spectral is None:
            A._spectral = info
    return A._spectral
