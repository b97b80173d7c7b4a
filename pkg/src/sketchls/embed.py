"""Randomized subspace embeddings: Gaussian, SRHT, and sparse (one +-1 per column).

All three operators are unbiased, E||Sx||^2 = ||x||^2:

* Gaussian entries are N(0, 1/d).
* SRHT composes random signs, an unnormalized Walsh-Hadamard transform on the
  zero-padded input (H^T H = m' I), uniform row sampling without replacement,
  and a 1/sqrt(d) scale.
* The sparse operator scatters each coordinate into one uniformly chosen row
  with a random sign and needs no scaling.

:func:`exact_distortion` measures the tight embedding parameter over
span([A b]) by an SVD of the sketched orthonormal basis; it is the oracle
against which every analytic bound in :mod:`sketchls.diagnostics` is checked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg
import scipy.sparse

from .matio import MatrixHandle
from .rng import rademacher, stream


class SketchKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SRHT = "srht"
    SPARSE = "sparse"


@dataclass(frozen=True)
class GaussianPayload:
    matrix: np.ndarray  # d x m, entries N(0, 1/d)


@dataclass(frozen=True)
class SrhtPayload:
    padded_len: int          # next power of two >= m
    signs: np.ndarray        # +-1, length padded_len
    indices: np.ndarray      # d distinct row indices in [0, padded_len)


@dataclass(frozen=True)
class SparsePayload:
    rows: np.ndarray   # target row per column, length m
    signs: np.ndarray  # +-1 per column, length m


@dataclass(frozen=True)
class SketchOperator:
    kind: SketchKind
    d: int
    m: int
    seed: int
    payload: Union[GaussianPayload, SrhtPayload, SparsePayload]


@dataclass
class DistortionReport:
    epsilon: float
    sigma_max_sq: float
    sigma_min_sq: float
    subspace_dim: int
    rank_loss: bool


def next_pow2(m: int) -> int:
    p = 1
    while p < m:
        p *= 2
    return p


def build_sketch(kind: Union[SketchKind, str], d: int, m: int, seed: int) -> SketchOperator:
    """Deterministically construct an embedding operator from (kind, d, m, seed)."""
    kind = SketchKind(kind)
    if d < 1:
        raise ValueError("d must be positive")
    if d >= m:
        raise ValueError(f"need d < m, got d={d}, m={m}")
    if kind is SketchKind.GAUSSIAN:
        mat = stream(seed, "gaussian", d, m).standard_normal((d, m)) / np.sqrt(d)
        payload = GaussianPayload(matrix=mat)
    elif kind is SketchKind.SRHT:
        mp = next_pow2(m)
        signs = rademacher(stream(seed, "srht", "signs", m), mp)
        indices = stream(seed, "srht", "sample", m).choice(mp, size=d, replace=False)
        payload = SrhtPayload(padded_len=mp, signs=signs, indices=np.sort(indices))
    else:
        gen_rows = stream(seed, "sparse", "rows", m)
        rows = gen_rows.integers(0, d, size=m)
        signs = rademacher(stream(seed, "sparse", "signs", m), m)
        payload = SparsePayload(rows=rows, signs=signs)
    return SketchOperator(kind=kind, d=d, m=m, seed=seed, payload=payload)


def identity_sketch(m: int) -> SketchOperator:
    """Degenerate d = m operator equal to the identity; verification double."""
    payload = SparsePayload(rows=np.arange(m), signs=np.ones(m))
    return SketchOperator(kind=SketchKind.SPARSE, d=m, m=m, seed=0, payload=payload)


def fwht(v: np.ndarray) -> np.ndarray:
    """In-place unnormalized Walsh-Hadamard transform along axis 0.

    Uses the Sylvester ordering; applying twice multiplies by the length.
    The length must be a power of two and the array C-contiguous.
    """
    n = v.shape[0]
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"length {n} is not a power of two")
    if not v.flags.c_contiguous:
        raise ValueError("fwht operates in place and needs a C-contiguous array")
    h = 1
    while h < n:
        blocks = v.reshape((n // (2 * h), 2, h) + v.shape[1:])
        a = blocks[:, 0].copy()
        blocks[:, 0] = a + blocks[:, 1]
        blocks[:, 1] = a - blocks[:, 1]
        h *= 2
    return v


def _as_dense(X) -> np.ndarray:
    if scipy.sparse.issparse(X):
        return X.toarray()
    if isinstance(X, MatrixHandle):
        return X.dense()
    return np.asarray(X, dtype=np.float64)


def apply(S: SketchOperator, X) -> np.ndarray:
    """Compute S @ X for a vector or matrix X with S.m rows."""
    X = _as_dense(X)
    if X.shape[0] != S.m:
        raise ValueError(f"operand has {X.shape[0]} rows, operator expects {S.m}")
    p = S.payload
    if isinstance(p, GaussianPayload):
        return p.matrix @ X
    if isinstance(p, SrhtPayload):
        Y = np.zeros((p.padded_len,) + X.shape[1:])
        signs_in = p.signs[: S.m]
        Y[: S.m] = X * (signs_in[:, None] if X.ndim == 2 else signs_in)
        fwht(Y)
        return Y[p.indices] / np.sqrt(S.d)
    out = np.zeros((S.d,) + X.shape[1:])
    np.add.at(out, p.rows, X * (p.signs[:, None] if X.ndim == 2 else p.signs))
    return out


def apply_adjoint(S: SketchOperator, U) -> np.ndarray:
    """Compute S^T @ U for a vector or matrix U with S.d rows."""
    U = _as_dense(U)
    if U.shape[0] != S.d:
        raise ValueError(f"operand has {U.shape[0]} rows, operator expects {S.d}")
    p = S.payload
    if isinstance(p, GaussianPayload):
        return p.matrix.T @ U
    if isinstance(p, SrhtPayload):
        Y = np.zeros((p.padded_len,) + U.shape[1:])
        Y[p.indices] = U
        fwht(Y)  # Sylvester Hadamard matrices are symmetric
        Y = Y[: S.m]
        signs_in = p.signs[: S.m]
        return Y * (signs_in[:, None] if U.ndim == 2 else signs_in) / np.sqrt(S.d)
    out = U[p.rows]
    return out * (p.signs[:, None] if U.ndim == 2 else p.signs)


MATERIALIZE_GUARD = 10_000_000


def materialize(S: SketchOperator) -> np.ndarray:
    """Explicit dense d x m matrix of the operator; oracle for :func:`apply`.

    Each kind is assembled from its defining formula rather than through the
    fast application path.
    """
    if S.d * S.m > MATERIALIZE_GUARD:
        raise ValueError(f"materialize guard: d*m = {S.d * S.m} exceeds {MATERIALIZE_GUARD}")
    p = S.payload
    if isinstance(p, GaussianPayload):
        return p.matrix.copy()
    if isinstance(p, SrhtPayload):
        H = scipy.linalg.hadamard(p.padded_len).astype(np.float64)
        full = (H[p.indices] * p.signs[None, :]) / np.sqrt(S.d)
        return full[:, : S.m]
    out = np.zeros((S.d, S.m))
    for j in range(S.m):
        out[p.rows[j], j] = p.signs[j]
    return out


def subspace_basis(A: MatrixHandle, b: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span([A b]) with numerical rank trimming."""
    M = np.column_stack([A.dense(), np.asarray(b, dtype=np.float64)])
    U, s, _ = scipy.linalg.svd(M, full_matrices=False)
    if s[0] == 0.0:
        raise ValueError("zero subspace")
    rank = int(np.sum(s > max(M.shape) * np.finfo(np.float64).eps * s[0]))
    return U[:, :rank]


def exact_distortion(S: SketchOperator, A: MatrixHandle, b: np.ndarray) -> DistortionReport:
    """Tight embedding parameter of S over span([A b]).

    Returns eps = max(sigma_max^2 - 1, 1 - sigma_min^2) over the singular
    values of S applied to an orthonormal basis of the subspace; this is the
    smallest value for which the two-sided embedding inequality holds there.
    A rank_loss flag marks sketches that annihilate part of the subspace.
    """
    Q = subspace_basis(A, b)
    dim = Q.shape[1]
    if dim > S.d:
        raise ValueError(f"subspace dimension {dim} exceeds sketch rows {S.d}")
    sv = scipy.linalg.svd(apply(S, Q), compute_uv=False)
    smax_sq = float(sv[0] ** 2)
    smin_sq = float(sv[-1] ** 2)
    eps = max(smax_sq - 1.0, 1.0 - smin_sq)
    rank_loss = sv[-1] <= np.finfo(np.float64).eps * max(S.d, dim) * sv[0]
    return DistortionReport(
        epsilon=eps,
        sigma_max_sq=smax_sq,
        sigma_min_sq=smin_sq,
        subspace_dim=dim,
        rank_loss=rank_loss,
    )


def sketch_to_text(S: SketchOperator) -> str:
    """Serialize construction parameters; the payload regenerates from them."""
    return f"kind={S.kind.value}\nd={S.d}\nm={S.m}\nseed={S.seed}\n"


def sketch_from_text(text: str) -> SketchOperator:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        return build_sketch(fields["kind"], int(fields["d"]), int(fields["m"]),
                            int(fields["seed"]))
    except KeyError as exc:
        raise ValueError(f"missing sketch field {exc}") from None
