"""Automatic rank selection for the compression loop.

Two strategies are implemented:

* ``bayesian``: an extreme rank is estimated per layer by the global analytic
  solution of empirical variational Bayesian matrix factorization applied to
  the channel unfoldings of the current weights, then pulled back toward the
  current rank by a weakening factor ``w`` (``w = 0`` keeps the current rank,
  ``w = 1`` jumps straight to the extreme rank).
* ``constant_rate``: ranks are the largest integers whose factorized layer
  stays within ``1/alpha`` of the current kernel parameter count, so every
  step shrinks each selected layer by at least ``alpha``.

Layers whose governing rank is below ``min_rank_guard`` are considered too
small to be worth compressing and are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .decomp import (
    CPFactors,
    IN_MODE,
    MultilinearRank2,
    OUT_MODE,
    SVDFactors,
    Tucker2Factors,
    cpd3_reconstruct,
)
from .tensor import reshape_kernel, unfold

__all__ = [
    "EVBMFEstimate",
    "RankStrategy",
    "LayerState",
    "RankDecision",
    "InfeasibleRankError",
    "evbmf_rank",
    "weakened_rank",
    "tucker2_rate_rank",
    "tucker2_budget_rank",
    "cpd3_rate_rank",
    "cpd3_budget_rank",
    "svd_budget_rank",
    "tucker2_params",
    "cpd3_params",
    "svd_params",
    "select_ranks",
]


class InfeasibleRankError(ValueError):
    """No rank >= 1 satisfies the requested parameter budget."""


# ---------------------------------------------------------------------------
# Empirical variational Bayesian matrix factorization (global analytic form)
# ---------------------------------------------------------------------------

# Slope of the shrinkage-threshold constant in the analytic solution.
_TAU_BAR_COEFF = 2.5129


@dataclass(frozen=True)
class EVBMFEstimate:
    """Result of the analytic EVB rank estimation.

    ``retained_singular_values`` holds the posterior (shrunk) estimates of the
    singular values judged to carry signal. ``degenerate`` flags an all-zero
    input, for which no noise level can be inferred.
    """

    rank: int
    noise_variance: float
    retained_singular_values: np.ndarray
    threshold: float = 0.0
    degenerate: bool = False


def _evb_free_energy(
    sigma2: float, s_sq: np.ndarray, n_rows: int, n_cols: int, residual: float
) -> float:
    """Free energy of the EVB solution at a candidate noise variance.

    ``s_sq`` are the squared retained singular values of the (tall-side-first)
    matrix, ``residual`` the squared mass of any discarded ones. Constant
    terms independent of ``sigma2`` are dropped.
    """
    alpha = n_rows / n_cols
    x_bar = _x_bar(alpha)
    x = s_sq / (n_cols * sigma2)
    big = x > x_bar
    z1 = x[big]
    z2 = x[~big]
    tau = 0.5 * (
        z1 - (1 + alpha) + np.sqrt(np.maximum((z1 - (1 + alpha)) ** 2 - 4 * alpha, 0.0))
    )
    obj = float(
        np.sum(z2 - np.log(z2))
        + np.sum(z1 - tau)
        + np.sum(np.log((tau + 1) / z1))
        + alpha * np.sum(np.log(tau / alpha + 1))
    )
    obj += residual / (n_cols * sigma2)
    obj += (n_rows - s_sq.shape[0]) * np.log(sigma2)
    return obj


def _x_bar(alpha: float) -> float:
    tau_bar = _TAU_BAR_COEFF * np.sqrt(alpha)
    return (1 + tau_bar) * (1 + alpha / tau_bar)


def evbmf_rank(m: np.ndarray) -> EVBMFEstimate:
    """Estimate the rank of ``m`` by the global analytic EVB solution.

    The noise variance is chosen by minimizing the free energy; candidate
    intervals are delimited by the squared singular values scaled to the
    shrinkage threshold, and each is searched to high precision, so the
    global minimum is found rather than a local one. The rank is the number
    of singular values above the resulting analytic threshold. The estimate
    is invariant under transposition.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got {m.ndim} modes")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    if m.shape[0] > m.shape[1]:
        m = m.T
    n_rows, n_cols = m.shape
    alpha = n_rows / n_cols

    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return EVBMFEstimate(
            rank=0,
            noise_variance=0.0,
            retained_singular_values=np.empty(0),
            degenerate=True,
        )

    # Exact zeros (rank-deficient input) enter only through the residual term.
    keep = s > s[0] * 1e-12
    s_kept_sq = s[keep] ** 2
    residual = float(np.sum(s**2) - np.sum(s_kept_sq))

    x_bar = _x_bar(alpha)
    total = float(np.sum(s**2))
    upper = total / (n_rows * n_cols)
    # At most ceil(L/(1+alpha)) - 1 components can ever be retained.
    cap = int(min(np.ceil(n_rows / (1 + alpha)) - 1, n_rows))
    tail_idx = max(cap, 0)
    tail_sq = s[min(tail_idx, n_rows - 1)] ** 2
    lower = max(tail_sq / (n_cols * x_bar), float(np.mean(s[tail_idx:] ** 2)) / n_cols)
    lower = min(lower, upper)

    def objective(log_sigma2: float) -> float:
        return _evb_free_energy(np.exp(log_sigma2), s_kept_sq, n_rows, n_cols, residual)

    # The objective is smooth between the points where a component crosses
    # the threshold; search each sub-interval and keep the global best.
    breaks = s_kept_sq / (n_cols * x_bar)
    points = np.unique(
        np.concatenate([[lower], breaks[(breaks > lower) & (breaks < upper)], [upper]])
    )
    log_points = np.log(points)
    best_sigma2 = upper
    best_val = objective(np.log(upper))
    for lo, hi in zip(log_points[:-1], log_points[1:]):
        for log_s2 in (lo, hi):
            val = objective(log_s2)
            if val < best_val:
                best_val, best_sigma2 = val, float(np.exp(log_s2))
        if hi - lo > 1e-12:
            res = optimize.minimize_scalar(
                objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10}
            )
            if res.fun < best_val:
                best_val, best_sigma2 = float(res.fun), float(np.exp(res.x))

    sigma2 = best_sigma2
    threshold = float(np.sqrt(n_cols * sigma2 * x_bar))
    pos = int(np.sum(s > threshold))
    top = s[:pos]
    ratio = (n_rows + n_cols) * sigma2 / top**2
    disc = np.maximum((1 - ratio) ** 2 - 4 * n_rows * n_cols * sigma2**2 / top**4, 0.0)
    shrunk = 0.5 * top * (1 - ratio + np.sqrt(disc))
    return EVBMFEstimate(
        rank=pos,
        noise_variance=sigma2,
        retained_singular_values=shrunk,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# Rank weakening and constant-rate formulas
# ---------------------------------------------------------------------------


def weakened_rank(r_init: int, r_extr: int, w: float) -> int:
    """Interpolate between the current rank and the extreme rank.

    Returns ``floor(r_init - w * (r_init - r_extr))`` clamped to
    ``[r_extr, r_init]``. ``w`` may take the endpoint values 0 and 1.
    """
    if r_extr > r_init:
        raise ValueError(f"extreme rank {r_extr} exceeds initial rank {r_init}")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"weakening factor {w} outside [0, 1]")
    value = int(np.floor(r_init - w * (r_init - r_extr)))
    return max(r_extr, min(r_init, value))


def tucker2_params(c_in: int, c_out: int, d: int, r_out: int, r_in: int) -> int:
    """Kernel parameters of a Tucker-2 decomposed conv layer."""
    return r_in * c_in + d * d * r_in * r_out + r_out * c_out


def cpd3_params(c_in: int, c_out: int, d: int, r: int) -> int:
    """Kernel parameters of a CP decomposed conv layer."""
    return r * (c_in + d * d + c_out)


def svd_params(l_in: int, l_out: int, r: int) -> int:
    """Weight parameters of an SVD decomposed fc layer."""
    return r * (l_in + l_out)


def _beta_partner(r: int, beta: float) -> int:
    return max(1, int(round(beta * r)))


def tucker2_budget_rank(
    c_in: int, c_out: int, d: int, budget: float, beta: float = 1.0
) -> MultilinearRank2:
    """Largest rank pair ``(r_out, r_in) = (round(beta*R), R)`` within budget.

    The result is tight: the returned pair fits the parameter budget and the
    pair built from ``R + 1`` violates it. Raises
    :class:`InfeasibleRankError` when even ``R = 1`` does not fit.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")

    def params(r: int) -> int:
        return tucker2_params(c_in, c_out, d, _beta_partner(r, beta), r)

    # Seed with the real-valued root of the parameter-count quadratic, then
    # correct for partner-rank rounding (params is monotone in R).
    a = beta * d * d
    b = c_in + beta * c_out
    root = (-b + np.sqrt(b * b + 4 * a * budget)) / (2 * a)
    r = max(int(np.floor(root)), 0)
    while params(r + 1) <= budget:
        r += 1
    while r >= 1 and params(r) > budget:
        r -= 1
    if r < 1:
        raise InfeasibleRankError(
            f"no rank fits a budget of {budget:.1f} parameters "
            f"(in={c_in}, out={c_out}, d={d}, beta={beta})"
        )
    return MultilinearRank2(r_out=_beta_partner(r, beta), r_in=r)


def tucker2_rate_rank(
    c_in: int, c_out: int, d: int, alpha: float, beta: float = 1.0
) -> MultilinearRank2:
    """Rank pair reducing an uncompressed conv kernel's parameters by ``alpha``."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return tucker2_budget_rank(c_in, c_out, d, d * d * c_in * c_out / alpha, beta)


def cpd3_budget_rank(c_in: int, c_out: int, d: int, budget: float) -> int:
    """Largest CP rank whose decomposed layer fits the parameter budget."""
    r = int(np.floor(budget / (c_in + d * d + c_out)))
    if r < 1:
        raise InfeasibleRankError(
            f"no CP rank fits a budget of {budget:.1f} parameters "
            f"(in={c_in}, out={c_out}, d={d})"
        )
    return r


def cpd3_rate_rank(c_in: int, c_out: int, d: int, alpha: float) -> int:
    """CP rank reducing an uncompressed conv kernel's parameters by ``alpha``."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return cpd3_budget_rank(c_in, c_out, d, d * d * c_in * c_out / alpha)


def svd_budget_rank(l_in: int, l_out: int, budget: float) -> int:
    """Largest SVD rank whose two-factor fc layer fits the parameter budget."""
    r = int(np.floor(budget / (l_in + l_out)))
    if r < 1:
        raise InfeasibleRankError(
            f"no SVD rank fits a budget of {budget:.1f} parameters "
            f"({l_in}x{l_out})"
        )
    return r


# ---------------------------------------------------------------------------
# Per-layer selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankStrategy:
    """How ranks are proposed at each compression step."""

    mode: str  # "bayesian" | "constant_rate"
    weakening_factor: float = 0.8
    alpha: float = 2.0
    beta: float = 1.0
    min_rank_guard: int = 21

    def __post_init__(self) -> None:
        if self.mode not in ("bayesian", "constant_rate"):
            raise ValueError(f"unknown strategy mode {self.mode!r}")
        if self.mode == "bayesian" and not 0.0 < self.weakening_factor <= 1.0:
            # Recommended operating range is 0.5 <= w <= 0.9.
            raise ValueError("weakening factor must lie in (0, 1]")
        if self.mode == "constant_rate" and self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.min_rank_guard < 1:
            raise ValueError("min_rank_guard must be >= 1")


@dataclass(frozen=True)
class LayerState:
    """Snapshot of one compressible layer handed to :func:`select_ranks`.

    Exactly one of ``weights`` (uncompressed layer) or ``factors``
    (already-decomposed layer) is set. Conv layers carry the original channel
    counts and filter size; fc layers carry the matrix dimensions.
    """

    kind: str  # "conv2d" | "fc"
    scheme: str  # "tucker2" | "cpd3" | "svd"
    c_in: int = 0
    c_out: int = 0
    d: int = 0
    l_in: int = 0
    l_out: int = 0
    weights: Optional[np.ndarray] = None
    factors: object = None

    @property
    def compressed(self) -> bool:
        return self.factors is not None


@dataclass(frozen=True)
class RankDecision:
    """Outcome of rank selection: either skip or compress at ``ranks``."""

    skip: bool
    reason: str = ""
    ranks: tuple[int, ...] = ()


def _skip(reason: str) -> RankDecision:
    return RankDecision(skip=True, reason=reason)


def _governing_rank(state: LayerState) -> int:
    if state.compressed:
        f = state.factors
        if isinstance(f, Tucker2Factors):
            return min(f.rank)
        if isinstance(f, (CPFactors, SVDFactors)):
            return f.rank
        raise ValueError(f"unsupported factor type {type(f).__name__}")
    if state.kind == "conv2d":
        return min(state.c_in, state.c_out)
    if state.kind == "fc":
        return min(state.l_in, state.l_out)
    raise ValueError(f"unsupported layer kind {state.kind!r}")


def _current_kernel_params(state: LayerState) -> int:
    if state.kind == "fc":
        if state.compressed:
            return svd_params(state.l_in, state.l_out, state.factors.rank)
        return state.l_in * state.l_out
    if state.compressed:
        f = state.factors
        if isinstance(f, Tucker2Factors):
            r_out, r_in = f.rank
            return tucker2_params(state.c_in, state.c_out, state.d, r_out, r_in)
        return cpd3_params(state.c_in, state.c_out, state.d, f.rank)
    return state.d * state.d * state.c_in * state.c_out


def select_ranks(state: LayerState, strategy: RankStrategy) -> RankDecision:
    """Propose new ranks for a layer, or skip it.

    Proposals never exceed the layer's current ranks, so the rank sequence
    over iterations is non-increasing. Skips are returned for layers below
    the minimum-rank guard and for constant-rate budgets no rank can meet.
    """
    if state.kind not in ("conv2d", "fc"):
        raise ValueError(f"unsupported layer kind {state.kind!r}")
    if _governing_rank(state) < strategy.min_rank_guard:
        return _skip("governing rank below min-rank guard")

    if strategy.mode == "constant_rate":
        return _select_constant_rate(state, strategy)
    return _select_bayesian(state, strategy)


def _select_constant_rate(state: LayerState, strategy: RankStrategy) -> RankDecision:
    budget = _current_kernel_params(state) / strategy.alpha
    try:
        if state.scheme == "tucker2":
            rank = tucker2_budget_rank(
                state.c_in, state.c_out, state.d, budget, strategy.beta
            )
            cur = state.factors.rank if state.compressed else MultilinearRank2(
                state.c_out, state.c_in
            )
            r_out = min(rank.r_out, cur.r_out, state.c_out)
            r_in = min(rank.r_in, cur.r_in, state.c_in)
            return RankDecision(skip=False, ranks=(r_out, r_in))
        if state.scheme == "cpd3":
            r = cpd3_budget_rank(state.c_in, state.c_out, state.d, budget)
            if state.compressed:
                r = min(r, state.factors.rank)
            return RankDecision(skip=False, ranks=(r,))
        if state.scheme == "svd":
            r = svd_budget_rank(state.l_in, state.l_out, budget)
            cap = state.factors.rank if state.compressed else min(state.l_in, state.l_out)
            return RankDecision(skip=False, ranks=(min(r, cap),))
    except InfeasibleRankError as exc:
        return _skip(str(exc))
    raise ValueError(f"unsupported scheme {state.scheme!r}")


def _select_bayesian(state: LayerState, strategy: RankStrategy) -> RankDecision:
    w = strategy.weakening_factor
    if state.scheme == "tucker2":
        if state.compressed:
            core = state.factors.core
            init_out, init_in = state.factors.rank
            e_out = evbmf_rank(unfold(core, OUT_MODE)).rank
            e_in = evbmf_rank(unfold(core, IN_MODE)).rank
        else:
            kernel = state.weights
            init_out, init_in = state.c_out, state.c_in
            e_out = evbmf_rank(unfold(kernel, OUT_MODE)).rank
            e_in = evbmf_rank(unfold(kernel, IN_MODE)).rank
        r_out = max(1, weakened_rank(init_out, min(e_out, init_out), w))
        r_in = max(1, weakened_rank(init_in, min(e_in, init_in), w))
        return RankDecision(skip=False, ranks=(r_out, r_in))

    if state.scheme == "cpd3":
        if state.compressed:
            t3 = cpd3_reconstruct(state.factors)
            init = state.factors.rank
        else:
            t3 = reshape_kernel(state.weights)
            # A CP rank has no per-mode cap; the larger channel count is used
            # as the nominal starting rank for weakening.
            init = max(state.c_in, state.c_out)
        e_out = evbmf_rank(unfold(t3, 1)).rank
        e_in = evbmf_rank(unfold(t3, 2)).rank
        extreme = min(max(e_out, e_in), init)
        r = max(1, weakened_rank(init, extreme, w))
        return RankDecision(skip=False, ranks=(r,))

    if state.scheme == "svd":
        if state.compressed:
            matrix = state.factors.compose()
            init = state.factors.rank
        else:
            matrix = state.weights
            init = min(state.l_in, state.l_out)
        extreme = min(evbmf_rank(matrix).rank, init)
        r = max(1, weakened_rank(init, extreme, w))
        return RankDecision(skip=False, ranks=(r,))

    raise ValueError(f"unsupported scheme {state.scheme!r}")
