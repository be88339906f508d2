"""Rank estimation, weakening, constant-rate bounds, per-layer selection."""

import numpy as np
import pytest

from evb_oracle import brute_force_rank, planted_matrix
from musco.decomp import (
    CPFactors,
    MultilinearRank2,
    SVDFactors,
    Tucker2Factors,
    cpd3_reconstruct,
    tucker2_decompose,
)
from musco.rank_select import (
    InfeasibleRankError,
    LayerState,
    RankStrategy,
    cpd3_params,
    cpd3_rate_rank,
    evbmf_rank,
    select_ranks,
    svd_params,
    tucker2_budget_rank,
    tucker2_params,
    tucker2_rate_rank,
    weakened_rank,
)
from musco.tensor import mode_product, unfold


class TestEvbmf:
    def test_zero_matrix_degenerate(self):
        est = evbmf_rank(np.zeros((5, 8)))
        assert est.rank == 0
        assert est.degenerate
        assert est.retained_singular_values.size == 0

    def test_pure_noise_rank_zero(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            if evbmf_rank(rng.standard_normal((100, 200))).rank == 0:
                hits += 1
        assert hits >= 9

    def test_planted_rank_recovered(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            if evbmf_rank(planted_matrix(rng)).rank == 10:
                hits += 1
        assert hits >= 9

    def test_agrees_with_brute_force_oracle(self):
        for seed in range(6):
            rng = np.random.default_rng(100 + seed)
            for m in (rng.standard_normal((60, 90)), planted_matrix(rng, 60, 90, 4, 12.0)):
                assert evbmf_rank(m).rank == brute_force_rank(m)

    def test_transpose_invariant(self):
        rng = np.random.default_rng(1)
        m = planted_matrix(rng, 50, 120, 5, 15.0)
        assert evbmf_rank(m).rank == evbmf_rank(m.T).rank

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        m = planted_matrix(rng, 80, 100, 6, 12.0)
        base = evbmf_rank(m).rank
        for c in (1e-3, 0.5, 40.0, 1e4):
            assert evbmf_rank(c * m).rank == base

    def test_noise_variance_positive_and_deterministic(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((40, 60))
        a, b = evbmf_rank(m), evbmf_rank(m.copy())
        assert a.noise_variance > 0
        assert a.noise_variance == b.noise_variance
        assert a.rank == b.rank

    def test_nonfinite_raises(self):
        m = np.ones((4, 4))
        m[0, 0] = np.inf
        with pytest.raises(ValueError):
            evbmf_rank(m)


class TestWeakenedRank:
    def test_endpoints(self):
        assert weakened_rank(256, 40, 0.0) == 256
        assert weakened_rank(256, 40, 1.0) == 40

    def test_worked_value(self):
        assert weakened_rank(256, 40, 0.8) == 83  # floor(256 - 0.8 * 216)

    def test_monotone_in_w(self):
        values = [weakened_rank(100, 10, w) for w in np.linspace(0, 1, 21)]
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert all(10 <= v <= 100 for v in values)

    def test_extreme_above_init_rejected(self):
        with pytest.raises(ValueError):
            weakened_rank(10, 11, 0.5)

    def test_w_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            weakened_rank(10, 5, 1.5)


GRID_C = (16, 64, 128, 256, 512)
GRID_D = (1, 3, 5, 7)
GRID_ALPHA = (1.5, 2.0, 3.16, 10.0)
GRID_BETA = (0.5, 1.0, 2.0)


class TestTucker2RateRank:
    def test_worked_example_512(self):
        rank = tucker2_rate_rank(512, 512, 3, 2.0, 1.0)
        assert rank == MultilinearRank2(309, 309)
        assert tucker2_params(512, 512, 3, 309, 309) == 1_175_745
        assert 1_175_745 <= 2_359_296 / 2
        assert tucker2_params(512, 512, 3, 310, 310) > 2_359_296 / 2

    def test_budget_tight_over_grid(self):
        for c in GRID_C:
            for d in GRID_D:
                for alpha in GRID_ALPHA:
                    for beta in GRID_BETA:
                        budget = d * d * c * c / alpha
                        try:
                            r_out, r_in = tucker2_rate_rank(c, c, d, alpha, beta)
                        except InfeasibleRankError:
                            # Tight in the degenerate sense: not even R = 1 fits.
                            assert tucker2_params(
                                c, c, d, max(1, round(beta)), 1
                            ) > budget
                            continue
                        assert tucker2_params(c, c, d, r_out, r_in) <= budget
                        nxt = r_in + 1
                        nxt_out = max(1, round(beta * nxt))
                        assert tucker2_params(c, c, d, nxt_out, nxt) > budget

    def test_alpha_sweep_never_exceeds_channels(self):
        for alpha in (1.0, 1.001, 1.01, 1.1, 1.5, 4.0):
            for c in (16, 64, 256):
                r_out, r_in = tucker2_rate_rank(c, c, 3, alpha, 1.0)
                assert r_in <= c and r_out <= c

    def test_d1_reduces_to_quadratic(self):
        for c in (16, 64, 128):
            for alpha in (1.5, 2.0, 4.0):
                r_out, r_in = tucker2_rate_rank(c, c, 1, alpha, 1.0)
                assert r_out == r_in
                # R^2 + 2cR - c^2/alpha <= 0 exactly characterizes feasibility
                assert r_in**2 + 2 * c * r_in - c * c / alpha <= 0
                nxt = r_in + 1
                assert nxt**2 + 2 * c * nxt - c * c / alpha > 0

    def test_infeasible_reported(self):
        with pytest.raises(InfeasibleRankError):
            tucker2_budget_rank(64, 64, 3, budget=50.0, beta=1.0)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            tucker2_rate_rank(64, 64, 3, 0.5, 1.0)
        with pytest.raises(ValueError):
            tucker2_rate_rank(64, 64, 3, 2.0, -1.0)


class TestCpd3RateRank:
    def test_worked_example_64(self):
        r = cpd3_rate_rank(64, 64, 3, 2.0)
        assert r == 134
        assert 134 * 137 == 18_358 <= 18_432
        assert 135 * 137 == 18_495 > 18_432

    def test_budget_tight_over_grid(self):
        for c in GRID_C:
            for d in GRID_D:
                for alpha in GRID_ALPHA:
                    budget = d * d * c * c / alpha
                    try:
                        r = cpd3_rate_rank(c, c, d, alpha)
                    except InfeasibleRankError:
                        assert cpd3_params(c, c, d, 1) > budget
                        continue
                    assert cpd3_params(c, c, d, r) <= budget
                    assert cpd3_params(c, c, d, r + 1) > budget

    def test_alpha_one_endpoint(self):
        # alpha = 1 keeps the full formula value with no reduction applied
        r = cpd3_rate_rank(64, 64, 3, 1.0)
        assert r == int(np.floor(9 * 64 * 64 / 137))

    def test_d1_substitution(self):
        for c in (16, 64, 128):
            assert cpd3_rate_rank(c, c, 1, 1.0) == int(np.floor(c * c / (2 * c + 1)))

    def test_infeasible_reported(self):
        with pytest.raises(InfeasibleRankError):
            cpd3_rate_rank(16, 16, 1, 100.0)


def make_conv_state(rng, c_in, c_out, d=3, scheme="tucker2"):
    return LayerState(
        kind="conv2d", scheme=scheme, c_in=c_in, c_out=c_out, d=d,
        weights=rng.standard_normal((d, d, c_out, c_in)),
    )


class TestSelectRanks:
    def test_small_conv_skipped(self):
        rng = np.random.default_rng(0)
        state = make_conv_state(rng, 16, 64)
        decision = select_ranks(state, RankStrategy(mode="constant_rate", alpha=2.0))
        assert decision.skip
        assert "guard" in decision.reason

    def test_constant_rate_matches_formula(self):
        rng = np.random.default_rng(1)
        state = make_conv_state(rng, 512, 512)
        decision = select_ranks(state, RankStrategy(mode="constant_rate", alpha=2.0))
        assert not decision.skip
        assert decision.ranks == (309, 309)

    def test_bayesian_planted_ranks(self):
        rng = np.random.default_rng(2)
        c_out, c_in, r_out, r_in = 24, 28, 5, 7
        core = rng.standard_normal((3, 3, r_out, r_in))
        q_out, _ = np.linalg.qr(rng.standard_normal((c_out, r_out)))
        q_in, _ = np.linalg.qr(rng.standard_normal((c_in, r_in)))
        kernel = mode_product(mode_product(core, q_out, 2), q_in, 3)
        kernel = kernel + 1e-3 * rng.standard_normal(kernel.shape)
        state = LayerState(kind="conv2d", scheme="tucker2", c_in=c_in, c_out=c_out,
                           d=3, weights=kernel)
        decision = select_ranks(
            state, RankStrategy(mode="bayesian", weakening_factor=1.0)
        )
        assert not decision.skip
        e_out = evbmf_rank(unfold(kernel, 2)).rank
        e_in = evbmf_rank(unfold(kernel, 3)).rank
        assert decision.ranks == (e_out, e_in)
        assert decision.ranks[0] <= r_out and decision.ranks[1] <= r_in

    def test_bayesian_weakening_between_extreme_and_init(self):
        rng = np.random.default_rng(3)
        state = make_conv_state(rng, 32, 48)
        strong = select_ranks(state, RankStrategy(mode="bayesian", weakening_factor=1.0))
        weak = select_ranks(state, RankStrategy(mode="bayesian", weakening_factor=0.5))
        assert not strong.skip and not weak.skip
        assert strong.ranks[0] <= weak.ranks[0] <= 48
        assert strong.ranks[1] <= weak.ranks[1] <= 32

    def test_compressed_tucker_proposal_respects_current(self):
        rng = np.random.default_rng(4)
        kernel = rng.standard_normal((3, 3, 64, 48))
        factors = tucker2_decompose(kernel, MultilinearRank2(30, 30))
        state = LayerState(kind="conv2d", scheme="tucker2", c_in=48, c_out=64, d=3,
                           factors=factors)
        decision = select_ranks(state, RankStrategy(mode="constant_rate", alpha=2.0))
        assert not decision.skip
        assert decision.ranks[0] <= 30 and decision.ranks[1] <= 30
        cur = tucker2_params(48, 64, 3, 30, 30)
        new = tucker2_params(48, 64, 3, *decision.ranks)
        assert new <= cur / 2.0

    def test_compressed_cp_constant_rate_halves_rank(self):
        rng = np.random.default_rng(5)
        factors = CPFactors(
            rng.standard_normal((9, 60)),
            rng.standard_normal((64, 60)),
            rng.standard_normal((48, 60)),
        )
        state = LayerState(kind="conv2d", scheme="cpd3", c_in=48, c_out=64, d=3,
                           factors=factors)
        decision = select_ranks(state, RankStrategy(mode="constant_rate", alpha=2.0))
        assert decision.ranks == (30,)

    def test_fc_bayesian_and_guard(self):
        rng = np.random.default_rng(6)
        small = LayerState(kind="fc", scheme="svd", l_in=128, l_out=10,
                           weights=rng.standard_normal((128, 10)))
        assert select_ranks(small, RankStrategy(mode="bayesian")).skip

        w = rng.standard_normal((256, 5)) @ rng.standard_normal((5, 128))
        w = w + 0.05 * rng.standard_normal((256, 128))
        big = LayerState(kind="fc", scheme="svd", l_in=256, l_out=128, weights=w)
        decision = select_ranks(big, RankStrategy(mode="bayesian", weakening_factor=1.0))
        assert not decision.skip
        assert decision.ranks[0] <= 128

    def test_infeasible_budget_skips(self):
        rng = np.random.default_rng(7)
        state = make_conv_state(rng, 32, 32, d=1)
        decision = select_ranks(state, RankStrategy(mode="constant_rate", alpha=50.0))
        assert decision.skip

    def test_unknown_kind_rejected(self):
        state = LayerState(kind="pool", scheme="tucker2")
        with pytest.raises(ValueError):
            select_ranks(state, RankStrategy(mode="constant_rate"))


class TestRankStrategyValidation:
    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            RankStrategy(mode="magic")

    def test_invalid_weakening(self):
        with pytest.raises(ValueError):
            RankStrategy(mode="bayesian", weakening_factor=0.0)

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            RankStrategy(mode="constant_rate", alpha=0.9)

    def test_guard_positive(self):
        with pytest.raises(ValueError):
            RankStrategy(mode="constant_rate", min_rank_guard=0)
