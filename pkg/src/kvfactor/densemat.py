"""Dense float64 matrices and the spectral primitives built on them.

The SVD here is a one-sided Jacobi: cyclic sweeps of plane rotations applied
to column pairs until every pair is orthogonal to relative tolerance. Jacobi
is slower than blocked bidiagonalization but it is simple, deterministic, and
accurate down to tiny singular values, which is what the rest of the toolkit
cares about.

All routines work on the :class:`Matrix` wrapper, which pins dtype float64,
validates finiteness at construction, and keeps the underlying buffer
read-only so results can be shared without defensive copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ContractViolationError, NumericalError, UndefinedInputError

JACOBI_REL_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
RANK_EPS_FACTOR = 1e-12


class Matrix:
    """Immutable dense 2-D float64 matrix."""

    __slots__ = ("data",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ContractViolationError(
                f"matrix must be 2-D, got {arr.ndim}-D shape {arr.shape}"
            )
        if arr.size and not np.all(np.isfinite(arr)):
            raise ContractViolationError("matrix entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Matrix is immutable")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Matrix":
        return Matrix(self.data.T)

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    @classmethod
    def diag(cls, values) -> "Matrix":
        return cls(np.diag(np.asarray(values, dtype=np.float64)))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors: u is m x r, sigma has length r, vt is r x n."""

    u: Matrix
    sigma: NDArray[np.float64]
    vt: Matrix

    @property
    def rank_dim(self) -> int:
        return len(self.sigma)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit conformability check."""
    if a.cols != b.rows:
        raise ContractViolationError(
            f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    return Matrix(a.data @ b.data)


def _round_robin_pairs(n: int) -> list[NDArray[np.intp]]:
    """Tournament schedule covering all column pairs in n-1 disjoint rounds."""
    slots = list(range(n)) + ([-1] if n % 2 else [])
    width = len(slots)
    rounds = []
    for _ in range(width - 1):
        pairs = [
            (min(slots[i], slots[width - 1 - i]), max(slots[i], slots[width - 1 - i]))
            for i in range(width // 2)
            if slots[i] != -1 and slots[width - 1 - i] != -1
        ]
        rounds.append(np.array(pairs, dtype=np.intp).reshape(-1, 2))
        slots = [slots[0], slots[-1]] + slots[1:-1]
    return rounds


def _jacobi_orthogonalize(a: NDArray[np.float64]) -> tuple[NDArray, NDArray]:
    """Rotate columns of a (m x n, m >= n) until mutually orthogonal.

    Pairs are processed in round-robin rounds of disjoint pairs, so each
    round's rotations vectorize; within a round the pairs share no columns,
    which makes the batch identical to applying them one by one. Returns
    (a_rotated, v) with a_original @ v == a_rotated. Raises NumericalError
    if the sweep limit is hit before convergence.
    """
    n = a.shape[1]
    if n < 2:
        return a, np.eye(n)
    v = np.eye(n)
    sq = np.einsum("ij,ij->j", a, a)
    rounds = _round_robin_pairs(n)
    last_off = 0.0
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        last_off = 0.0
        for pairs in rounds:
            p = pairs[:, 0]
            q = pairs[:, 1]
            gamma = np.einsum("ij,ij->j", a[:, p], a[:, q])
            denom = np.sqrt(sq[p] * sq[q])
            live = denom > 0.0
            rel = np.zeros(len(pairs))
            rel[live] = np.abs(gamma[live]) / denom[live]
            round_off = float(rel.max()) if len(rel) else 0.0
            if round_off > last_off:
                last_off = round_off
            hot = rel > JACOBI_REL_TOL
            if not hot.any():
                continue
            rotated = True
            pm = p[hot]
            qm = q[hot]
            g = gamma[hot]
            zeta = (sq[qm] - sq[pm]) / (2.0 * g)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap = a[:, pm]
            aq = a[:, qm]
            a[:, pm] = c * ap - s * aq
            a[:, qm] = s * ap + c * aq
            vp = v[:, pm]
            vq = v[:, qm]
            v[:, pm] = c * vp - s * vq
            v[:, qm] = s * vp + c * vq
            sq[pm] = np.einsum("ij,ij->j", a[:, pm], a[:, pm])
            sq[qm] = np.einsum("ij,ij->j", a[:, qm], a[:, qm])
        if not rotated:
            return a, v
    raise NumericalError(
        f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps",
        residual=last_off,
    )


def _orthonormal_columns(
    rotated: NDArray[np.float64], sigma: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Build orthonormal u columns from rotated columns.

    Columns are normalized in descending-sigma order and re-orthogonalized by
    modified Gram-Schmidt, which keeps tiny-sigma directions orthonormal even
    when rotation roundoff dominates them. Columns with no usable direction
    (exact zeros, or ones that collapse under projection) are replaced by the
    first coordinate vector that survives projection, so u is always a full
    orthonormal frame.
    """
    m, r = rotated.shape
    u = np.zeros((m, r))
    smax = float(sigma[0]) if r else 0.0
    for i in range(r):
        col = rotated[:, i].copy()
        usable = smax > 0.0 and sigma[i] > RANK_EPS_FACTOR * smax
        if usable:
            col /= sigma[i]
            for j in range(i):
                col -= (u[:, j] @ col) * u[:, j]
            norm = float(np.linalg.norm(col))
            if norm > 0.5:
                u[:, i] = col / norm
                continue
        best = None
        best_norm = -1.0
        for k in range(m):
            cand = np.zeros(m)
            cand[k] = 1.0
            for j in range(i):
                cand -= (u[:, j] @ cand) * u[:, j]
            norm = float(np.linalg.norm(cand))
            if norm > 0.5:
                best, best_norm = cand, norm
                break
            if norm > best_norm:
                best, best_norm = cand, norm
        u[:, i] = best / best_norm
    return u


def svd(m: Matrix) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Singular values come back nonincreasing; each u column has its first
    nonzero entry nonnegative so repeated runs and golden files agree.
    """
    a = m.data
    if a.shape[0] >= a.shape[1]:
        rotated, v = _jacobi_orthogonalize(a.copy())
        sigma = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
        order = np.argsort(-sigma, kind="stable")
        sigma = sigma[order]
        rotated = rotated[:, order]
        v = v[:, order]
        u = _orthonormal_columns(rotated, sigma)
        vt = v.T.copy()
    else:
        inner = svd(m.T)
        u = inner.vt.data.T.copy()
        sigma = inner.sigma.copy()
        vt = inner.u.data.T.copy()

    for i in range(u.shape[1]):
        col = u[:, i]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, i] = -col
            vt[i, :] = -vt[i, :]
    sigma.setflags(write=False)
    return SvdResult(u=Matrix(u), sigma=sigma, vt=Matrix(vt))


def truncate(s: SvdResult, k: int) -> SvdResult:
    """Keep the k largest singular triplets."""
    r = s.rank_dim
    if not 1 <= k <= r:
        raise ContractViolationError(f"truncation rank {k} outside [1, {r}]")
    sigma = s.sigma[:k].copy()
    sigma.setflags(write=False)
    return SvdResult(
        u=Matrix(s.u.data[:, :k]),
        sigma=sigma,
        vt=Matrix(s.vt.data[:k, :]),
    )


def reconstruct(s: SvdResult) -> Matrix:
    """Multiply the factors back into a dense matrix."""
    return Matrix((s.u.data * s.sigma) @ s.vt.data)


def spectral_norm(m: Matrix) -> float:
    """Largest singular value."""
    if m.rows == 0 or m.cols == 0:
        return 0.0
    return float(svd(m).sigma[0])


def condition_number(m: Matrix) -> float:
    """sigma_max / sigma_min over min(rows, cols) singular values.

    Values below RANK_EPS_FACTOR * sigma_max count as zero, giving inf.
    """
    sigma = svd(m).sigma
    smax = float(sigma[0])
    smin = float(sigma[-1])
    if smax == 0.0:
        return math.inf
    if smin <= RANK_EPS_FACTOR * smax:
        return math.inf
    return smax / smin


def frobenius_rel_error(m: Matrix, approx: Matrix) -> float:
    """|| m - approx ||_F / || m ||_F."""
    if m.rows != approx.rows or m.cols != approx.cols:
        raise ContractViolationError(
            f"shape mismatch: {m.rows}x{m.cols} vs {approx.rows}x{approx.cols}"
        )
    denom = float(np.linalg.norm(m.data))
    if denom == 0.0:
        raise UndefinedInputError(
            "relative error undefined for a zero reference matrix"
        )
    return float(np.linalg.norm(m.data - approx.data)) / denom
