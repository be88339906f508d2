"""Low-rank factorizations of layer weights and their in-place recompression.

Three factorized forms are supported:

* Tucker-2 of a 4-way conv kernel: only the two channel modes are factored,
  the core keeps the spatial modes. Computed by truncated SVD of the channel
  unfoldings followed by alternating refinement sweeps, so factors have
  orthonormal columns.
* CP of the 3-way reshaped kernel ``(d*d, c_out, c_in)``: alternating least
  squares with seeded restarts.
* SVD of a fully connected weight matrix.

Each form has a ``*_recompress`` counterpart that lowers the rank without
leaving factorized form: Tucker-2 re-decomposes only the small core and
absorbs its factors, CP runs ALS against the implicit tensor through Gram
matrices, and SVD reduces via QR of the two factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .linalg import khatri_rao, solve_least_squares, svd, truncated_svd
from .tensor import fold, frobenius, mode_product, unfold

__all__ = [
    "MultilinearRank2",
    "Tucker2Factors",
    "CPFactors",
    "SVDFactors",
    "AlsOptions",
    "AlsFit",
    "tucker2_decompose",
    "tucker2_reconstruct",
    "tucker2_recompress",
    "cpd3_decompose",
    "cpd3_reconstruct",
    "cpd3_recompress",
    "svd_decompose",
    "svd_recompress",
]

# Kernel modes are (h, w, c_out, c_in).
OUT_MODE = 2
IN_MODE = 3

HOOI_MAX_SWEEPS = 10
HOOI_TOL = 1e-8


class MultilinearRank2(NamedTuple):
    """Channel-mode multilinear rank of a Tucker-2 factorization."""

    r_out: int
    r_in: int


@dataclass(frozen=True)
class Tucker2Factors:
    """Tucker-2 factorization ``kernel ~ core x_out factor_out x_in factor_in``.

    ``core`` has shape ``(d, d, r_out, r_in)``; ``factor_out`` is
    ``(c_out, r_out)`` and ``factor_in`` is ``(c_in, r_in)``. ``orthonormal``
    records whether the factor columns are currently orthonormal; fine-tuning
    the factors clears it, which weakens the recompression guarantee.
    """

    core: np.ndarray
    factor_out: np.ndarray
    factor_in: np.ndarray
    orthonormal: bool = False

    @property
    def rank(self) -> MultilinearRank2:
        return MultilinearRank2(self.core.shape[OUT_MODE], self.core.shape[IN_MODE])

    def validate(self) -> None:
        d0, d1, r_out, r_in = self.core.shape
        if d0 != d1:
            raise ValueError(f"core spatial modes must match, got {self.core.shape}")
        if self.factor_out.shape[1] != r_out or self.factor_in.shape[1] != r_in:
            raise ValueError("factor column counts do not match the core ranks")
        if self.orthonormal:
            for name, f in (("factor_out", self.factor_out), ("factor_in", self.factor_in)):
                gram = f.T @ f
                if not np.allclose(gram, np.eye(f.shape[1]), atol=1e-8):
                    raise ValueError(f"{name} columns are not orthonormal")


@dataclass(frozen=True)
class CPFactors:
    """Rank-``R`` CP factorization of a ``(d*d, c_out, c_in)`` tensor.

    Each factor matrix has ``R`` columns; term ``r`` of the reconstruction is
    the outer product of the three ``r``-th columns.
    """

    factor_spatial: np.ndarray
    factor_out: np.ndarray
    factor_in: np.ndarray

    @property
    def rank(self) -> int:
        return self.factor_spatial.shape[1]

    def validate(self) -> None:
        r = self.rank
        if r < 1:
            raise ValueError("CP rank must be >= 1")
        if self.factor_out.shape[1] != r or self.factor_in.shape[1] != r:
            raise ValueError("CP factors must share a column count")


@dataclass(frozen=True)
class SVDFactors:
    """Two-factor form ``W ~ theta_in @ theta_out`` of an fc weight matrix.

    ``theta_in`` is ``(l_in, R)`` (left singular vectors scaled by singular
    values) and ``theta_out`` is ``(R, l_out)``.
    """

    theta_in: np.ndarray
    theta_out: np.ndarray

    @property
    def rank(self) -> int:
        return self.theta_in.shape[1]

    def compose(self) -> np.ndarray:
        return self.theta_in @ self.theta_out

    def validate(self) -> None:
        if self.theta_in.shape[1] != self.theta_out.shape[0]:
            raise ValueError("inner dimensions of the SVD factors disagree")
        if self.rank > min(self.theta_in.shape[0], self.theta_out.shape[1]):
            raise ValueError("rank exceeds the matrix dimensions")


# ---------------------------------------------------------------------------
# Tucker-2
# ---------------------------------------------------------------------------


def _leading_left_vectors(m: np.ndarray, r: int) -> np.ndarray:
    return truncated_svd(m, r).u


def tucker2_decompose(kernel: np.ndarray, rank: MultilinearRank2) -> Tucker2Factors:
    """Tucker-2 factorization of a ``(d, d, c_out, c_in)`` kernel.

    Initialized from truncated SVDs of the two channel unfoldings, then
    refined by alternating sweeps (each factor re-fit with the other fixed)
    until the relative error stops improving. Factors come out with
    orthonormal columns; at full rank the reconstruction is exact.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"expected a square-spatial 4-way kernel, got {kernel.shape}")
    c_out, c_in = kernel.shape[OUT_MODE], kernel.shape[IN_MODE]
    r_out, r_in = int(rank[0]), int(rank[1])
    if not (1 <= r_out <= c_out and 1 <= r_in <= c_in):
        raise ValueError(
            f"rank ({r_out}, {r_in}) out of range for channels ({c_out}, {c_in})"
        )

    norm_sq = frobenius(kernel) ** 2
    u_out = _leading_left_vectors(unfold(kernel, OUT_MODE), r_out)
    u_in = _leading_left_vectors(unfold(kernel, IN_MODE), r_in)

    def core_of(a_out: np.ndarray, a_in: np.ndarray) -> np.ndarray:
        return mode_product(mode_product(kernel, a_out.T, OUT_MODE), a_in.T, IN_MODE)

    def err_of(core: np.ndarray) -> float:
        # Valid because the factors are orthonormal.
        if norm_sq == 0.0:
            return 0.0
        gap = max(norm_sq - frobenius(core) ** 2, 0.0)
        return float(np.sqrt(gap / norm_sq))

    best_core = core_of(u_out, u_in)
    best = (err_of(best_core), u_out, u_in, best_core)
    prev_err = best[0]
    for _ in range(HOOI_MAX_SWEEPS):
        if prev_err <= 1e-14:
            break
        u_out = _leading_left_vectors(
            unfold(mode_product(kernel, u_in.T, IN_MODE), OUT_MODE), r_out
        )
        u_in = _leading_left_vectors(
            unfold(mode_product(kernel, u_out.T, OUT_MODE), IN_MODE), r_in
        )
        core = core_of(u_out, u_in)
        err = err_of(core)
        if err < best[0]:
            best = (err, u_out, u_in, core)
        if abs(prev_err - err) < HOOI_TOL * max(prev_err, 1e-30):
            break
        prev_err = err

    _, u_out, u_in, core = best
    return Tucker2Factors(core=core, factor_out=u_out, factor_in=u_in, orthonormal=True)


def tucker2_reconstruct(f: Tucker2Factors) -> np.ndarray:
    """Expand Tucker-2 factors back into a full 4-way kernel."""
    f.validate()
    return mode_product(
        mode_product(f.core, f.factor_out, OUT_MODE), f.factor_in, IN_MODE
    )


def tucker2_recompress(f: Tucker2Factors, rank: MultilinearRank2) -> Tucker2Factors:
    """Lower the rank of a Tucker-2 factorization without expanding it.

    Only the small core is re-decomposed; its factors are absorbed into the
    existing ones. When the input factors are orthonormal this reproduces the
    full reconstruct-then-redecompose result, at a fraction of the cost.
    """
    f.validate()
    r_out, r_in = int(rank[0]), int(rank[1])
    cur = f.rank
    if r_out > cur.r_out or r_in > cur.r_in:
        raise ValueError(f"rank ({r_out}, {r_in}) exceeds current {tuple(cur)}")
    inner = tucker2_decompose(f.core, MultilinearRank2(r_out, r_in))
    return Tucker2Factors(
        core=inner.core,
        factor_out=f.factor_out @ inner.factor_out,
        factor_in=f.factor_in @ inner.factor_in,
        # A product of orthonormal-column matrices keeps orthonormal columns.
        orthonormal=f.orthonormal,
    )


# ---------------------------------------------------------------------------
# CP (3-way)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlsOptions:
    """Controls for the alternating least-squares runs."""

    tol: float = 1e-8
    max_sweeps: int = 500
    restarts: int = 3
    seed: int = 0
    hosvd_init: bool = True


@dataclass(frozen=True)
class AlsFit:
    """Outcome of one ALS run: achieved error, sweeps, per-sweep error log."""

    rel_error: float
    sweeps: int
    error_history: tuple[float, ...] = field(default_factory=tuple)


def _balance_columns(factors: list[np.ndarray]) -> list[np.ndarray]:
    """Rescale so each column carries the same norm in every factor."""
    norms = [np.linalg.norm(f, axis=0) for f in factors]
    weight = norms[0] * norms[1] * norms[2]
    target = np.cbrt(weight)
    out = []
    for f, n in zip(factors, norms):
        scale = np.where(n > 0, target / np.where(n > 0, n, 1.0), 1.0)
        out.append(f * scale)
    return out


class _ExplicitCp:
    """ALS target given as a dense 3-way tensor."""

    def __init__(self, t: np.ndarray):
        self.shape = t.shape
        self.norm_sq = frobenius(t) ** 2
        self._unfoldings = [unfold(t, n) for n in range(3)]

    def matricized_times_kr(self, mode: int, factors: list[np.ndarray]) -> np.ndarray:
        others = [f for n, f in enumerate(factors) if n != mode]
        return self._unfoldings[mode] @ khatri_rao(others[0], others[1])

    def error(self, factors: list[np.ndarray]) -> float:
        if self.norm_sq == 0.0:
            return 0.0
        approx = factors[0] @ khatri_rao(factors[1], factors[2]).T
        return float(
            np.linalg.norm(self._unfoldings[0] - approx) / np.sqrt(self.norm_sq)
        )

    def init_basis(self, mode: int, r: int) -> np.ndarray:
        m = self._unfoldings[mode]
        return truncated_svd(m, min(r, min(m.shape))).u


class _ImplicitCp:
    """ALS target given in CP form; all products go through Gram matrices."""

    def __init__(self, old: list[np.ndarray]):
        self.old = old
        self.shape = tuple(f.shape[0] for f in old)
        gram = (old[0].T @ old[0]) * (old[1].T @ old[1]) * (old[2].T @ old[2])
        self.norm_sq = float(max(np.sum(gram), 0.0))

    def matricized_times_kr(self, mode: int, factors: list[np.ndarray]) -> np.ndarray:
        cross = np.ones((self.old[0].shape[1], factors[0].shape[1]))
        for n in range(3):
            if n != mode:
                cross = cross * (self.old[n].T @ factors[n])
        return self.old[mode] @ cross

    def error(self, factors: list[np.ndarray]) -> float:
        # ||T - T_hat||^2 through Gram matrices; exact up to cancellation
        # noise of about sqrt(eps) * ||T||, which the stopping rule tolerates.
        if self.norm_sq == 0.0:
            return 0.0
        cross = float(np.sum(self.matricized_times_kr(2, factors) * factors[2]))
        gram = (
            (factors[0].T @ factors[0])
            * (factors[1].T @ factors[1])
            * (factors[2].T @ factors[2])
        )
        fit_sq = max(self.norm_sq - 2.0 * cross + float(np.sum(gram)), 0.0)
        return float(np.sqrt(fit_sq / self.norm_sq))

    def init_basis(self, mode: int, r: int) -> np.ndarray:
        # Left singular vectors of the mode unfolding, computed from the CP
        # form: the unfolding is old[mode] @ K^T with K^T K available as a
        # Gram product, so old[mode] @ chol(K^T K) has the same left vectors.
        gram = np.ones((self.old[mode].shape[1],) * 2)
        for n in range(3):
            if n != mode:
                gram = gram * (self.old[n].T @ self.old[n])
        w, v = np.linalg.eigh(gram)
        half = v * np.sqrt(np.clip(w, 0.0, None))
        m = self.old[mode] @ half
        return truncated_svd(m, min(r, min(m.shape))).u


def _pad_random_columns(basis: np.ndarray, r: int, rng: np.random.Generator) -> np.ndarray:
    if basis.shape[1] >= r:
        return basis[:, :r]
    extra = rng.standard_normal((basis.shape[0], r - basis.shape[1]))
    return np.hstack([basis, extra])


def _als_run(
    target, factors: list[np.ndarray], opts: AlsOptions
) -> tuple[list[np.ndarray], AlsFit]:
    history: list[float] = []
    err = np.inf
    sweeps = 0
    for sweep in range(opts.max_sweeps):
        for mode in range(3):
            m = target.matricized_times_kr(mode, factors)
            others = [f for n, f in enumerate(factors) if n != mode]
            gram = (others[0].T @ others[0]) * (others[1].T @ others[1])
            factors[mode] = solve_least_squares(gram, m.T).T
        factors = _balance_columns(factors)
        sweeps = sweep + 1
        new_err = target.error(factors)
        history.append(new_err)
        if new_err <= 1e-14:
            err = new_err
            break
        if np.isfinite(err) and abs(err - new_err) < opts.tol * max(err, 1e-30):
            err = min(err, new_err)
            break
        err = new_err
    return factors, AlsFit(err, sweeps, tuple(history))


def _als_best(
    target, r: int, opts: AlsOptions, extra_inits: Sequence[list[np.ndarray]] = ()
) -> tuple[list[np.ndarray], AlsFit]:
    inits: list[list[np.ndarray]] = [list(init) for init in extra_inits]
    if opts.hosvd_init:
        rng = np.random.default_rng([opts.seed, 0x5351])
        inits.append([_pad_random_columns(target.init_basis(n, r), r, rng) for n in range(3)])
    for j in range(opts.restarts):
        rng = np.random.default_rng([opts.seed, j])
        inits.append([rng.standard_normal((e, r)) for e in target.shape])

    best: tuple[list[np.ndarray], AlsFit] | None = None
    for init in inits:
        factors, fit = _als_run(target, [f.copy() for f in init], opts)
        if best is None or fit.rel_error < best[1].rel_error:
            best = (factors, fit)
    assert best is not None
    return best


def cpd3_decompose(
    t: np.ndarray, r: int, opts: AlsOptions | None = None
) -> tuple[CPFactors, AlsFit]:
    """Rank-``r`` CP factorization of a 3-way tensor by ALS.

    Runs one SVD-based and ``opts.restarts`` random seeded initializations,
    keeping the best. Non-convergence is not an error: the returned fit
    carries the achieved relative error and sweep count. Columns are
    norm-balanced across the three factors.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got {t.ndim} modes")
    if r < 1:
        raise ValueError("CP rank must be >= 1")
    opts = opts or AlsOptions()
    factors, fit = _als_best(_ExplicitCp(t), r, opts)
    return CPFactors(*factors), fit


def cpd3_reconstruct(f: CPFactors) -> np.ndarray:
    """Sum of rank-one terms defined by the CP factors."""
    f.validate()
    shape = (f.factor_spatial.shape[0], f.factor_out.shape[0], f.factor_in.shape[0])
    m = f.factor_spatial @ khatri_rao(f.factor_out, f.factor_in).T
    return fold(m, 0, shape)


def cpd3_recompress(
    f: CPFactors, r: int, opts: AlsOptions | None = None
) -> tuple[CPFactors, AlsFit]:
    """Re-fit CP factors at a lower rank against the implicit tensor.

    The tensor is never materialized: ALS normal equations use Gram matrices
    of the existing factors. One initialization keeps the ``r`` dominant
    norm-balanced columns of the input; the remaining ones mirror
    :func:`cpd3_decompose` so the achieved error tracks the explicit path.
    """
    f.validate()
    if r > f.rank:
        raise ValueError(f"rank {r} exceeds current CP rank {f.rank}")
    opts = opts or AlsOptions()
    balanced = _balance_columns([f.factor_spatial, f.factor_out, f.factor_in])
    order = np.argsort(-np.linalg.norm(balanced[0], axis=0))[:r]
    dominant = [b[:, order].copy() for b in balanced]
    target = _ImplicitCp([f.factor_spatial, f.factor_out, f.factor_in])
    factors, fit = _als_best(target, r, opts, extra_inits=[dominant])
    return CPFactors(*factors), fit


# ---------------------------------------------------------------------------
# SVD (fully connected layers)
# ---------------------------------------------------------------------------


def svd_decompose(w: np.ndarray, r: int) -> SVDFactors:
    """Best rank-``r`` two-factor form of a weight matrix."""
    res = truncated_svd(w, r)
    return SVDFactors(theta_in=res.u * res.s, theta_out=res.v.T)


def svd_recompress(f: SVDFactors, r: int) -> SVDFactors:
    """Truncate ``theta_in @ theta_out`` to rank ``r`` without forming it.

    QR-reduces both factors and takes the SVD of the small middle matrix;
    exactly matches truncating the SVD of the explicit product.
    """
    f.validate()
    if r > f.rank:
        raise ValueError(f"rank {r} exceeds current rank {f.rank}")
    q1, r1 = np.linalg.qr(f.theta_in)
    q2, r2 = np.linalg.qr(f.theta_out.T)
    mid = svd(r1 @ r2.T)
    theta_in = (q1 @ mid.u[:, :r]) * mid.s[:r]
    theta_out = (q2 @ mid.v[:, :r]).T
    return SVDFactors(theta_in=theta_in, theta_out=theta_out)
