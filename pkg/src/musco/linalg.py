"""Matrix factorizations and solvers backing the tensor decompositions."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = ["SVDResult", "svd", "truncated_svd", "solve_least_squares", "khatri_rao"]

# Singular values below LSTSQ_RCOND * sigma_max are treated as zero when
# solving least-squares systems; guards ALS steps on correlated factors.
LSTSQ_RCOND = 1e-12


class SVDResult(NamedTuple):
    """Thin SVD ``m == u @ diag(s) @ v.T`` with orthonormal-column u, v."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def compose(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def svd(m: np.ndarray) -> SVDResult:
    """Deterministic thin SVD.

    Signs are fixed so the largest-magnitude entry of each left singular
    vector is positive, making repeated calls bit-identical and downstream
    factorizations reproducible.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got {m.ndim} modes")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    k = s.shape[0]
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(k)])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return SVDResult(u, s, vt.T)


def truncated_svd(m: np.ndarray, r: int) -> SVDResult:
    """Best rank-``r`` approximation factors of ``m`` (Frobenius-optimal)."""
    m = np.asarray(m)
    max_r = min(m.shape)
    if not 1 <= r <= max_r:
        raise ValueError(f"rank {r} out of range [1, {max_r}] for shape {m.shape}")
    full = svd(m)
    return SVDResult(full.u[:, :r].copy(), full.s[:r].copy(), full.v[:, :r].copy())


def solve_least_squares(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of ``min_x ||a @ x - b||_F``.

    Rank-revealing (SVD-based); singular values below ``1e-12 * sigma_max``
    are treated as zero, so nearly rank-deficient systems stay stable.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError("expected matrix a and vector/matrix b")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: a has {a.shape[0]}, b has {b.shape[0]}")
    x, _, _, _ = np.linalg.lstsq(a, b, rcond=LSTSQ_RCOND)
    return x


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product.

    Column ``r`` of the result is the vectorized outer product of the ``r``-th
    columns of ``a`` and ``b``, linearized with ``a``'s index varying fastest
    (matching the tensor-module unfolding convention).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"factors must share a column count, got {a.shape} and {b.shape}"
        )
    n = a.shape[0] * b.shape[0]
    return np.reshape(a[:, None, :] * b[None, :, :], (n, a.shape[1]), order="F")
