"""Shape inference, layer substitution, and cost accounting."""

import numpy as np
import pytest

from musco.decomp import (
    CPFactors,
    MultilinearRank2,
    cpd3_decompose,
    cpd3_reconstruct,
    svd_decompose,
    tucker2_decompose,
    tucker2_recompress,
    tucker2_reconstruct,
)
from musco.modelgraph import (
    conv2d,
    count_flops,
    count_params,
    extract_group_factors,
    fc,
    flatten,
    grouped_conv2d,
    infer_shapes,
    maxpool2d,
    relu,
    sequential,
    softmax_xent_head,
    substitute_conv_cpd3,
    substitute_conv_tucker2,
    substitute_fc_svd,
    update_group_weights,
)
from musco.tensor import reshape_kernel, restore_kernel
from musco.trainer import forward


def roundtrip32(x):
    """Simulate 32-bit weight storage."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


class TestInferShapes:
    def test_resnet_stem(self):
        g = sequential((224, 224, 3), [conv2d(7, 3, 64, stride=2, padding=3)])
        assert infer_shapes(g) == [(112, 112, 64)]

    def test_one_by_one_preserves_spatial(self):
        g = sequential((17, 13, 4), [conv2d(1, 4, 9)])
        assert infer_shapes(g) == [(17, 13, 9)]

    def test_maxpool_halves(self):
        g = sequential((224, 224, 8), [maxpool2d(2)])
        assert infer_shapes(g) == [(112, 112, 8)]

    def test_full_stack(self):
        g = sequential(
            (28, 28, 1),
            [
                conv2d(3, 1, 8, padding=1),
                relu(),
                maxpool2d(2),
                flatten(),
                fc(14 * 14 * 8, 10),
                softmax_xent_head(),
            ],
        )
        assert infer_shapes(g)[-1] == (10,)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            sequential((8, 8, 3), [conv2d(3, 4, 8)])

    def test_fc_size_mismatch_raises(self):
        with pytest.raises(ValueError):
            sequential((4, 4, 2), [flatten(), fc(33, 5)])


class TestSubstituteTucker2:
    def _graph(self, rng, stride=1):
        k = rng.standard_normal((3, 3, 14, 10))
        b = rng.standard_normal(14)
        return sequential(
            (12, 12, 10),
            [conv2d(3, 10, 14, stride=stride, padding=1, weights=k, bias=b), relu(), flatten()],
        )

    def test_lossless_substitution_equivalence(self):
        rng = np.random.default_rng(0)
        g = self._graph(rng)
        f = tucker2_decompose(g.layers[0].weights, MultilinearRank2(14, 10))
        g2 = substitute_conv_tucker2(g, 0, f)
        x = roundtrip32(rng.standard_normal((4, 12, 12, 10)))
        y1, _ = forward(g, x)
        y2, _ = forward(g2, x)
        assert np.max(np.abs(y1 - y2)) <= 1e-4 * max(1.0, np.max(np.abs(y1)))

    def test_truncated_matches_reconstructed_kernel(self):
        rng = np.random.default_rng(1)
        g = self._graph(rng)
        f = tucker2_decompose(g.layers[0].weights, MultilinearRank2(8, 8))
        g2 = substitute_conv_tucker2(g, 0, f)
        k_rec = tucker2_reconstruct(f)
        g3 = sequential(
            (12, 12, 10),
            [conv2d(3, 10, 14, padding=1, weights=k_rec, bias=g.layers[0].bias),
             relu(), flatten()],
        )
        x = rng.standard_normal((4, 12, 12, 10))
        y2, _ = forward(g2, x)
        y3, _ = forward(g3, x)
        assert np.max(np.abs(y2 - y3)) <= 1e-8

    def test_stride_placement(self):
        rng = np.random.default_rng(2)
        g = self._graph(rng, stride=2)
        f = tucker2_decompose(g.layers[0].weights, MultilinearRank2(5, 5))
        g2 = substitute_conv_tucker2(g, 0, f)
        first, mid, last = g2.layers[:3]
        assert (first.d, first.stride, first.padding) == (1, 1, 0)
        assert (mid.d, mid.stride, mid.padding) == (3, 2, 1)
        assert (last.d, last.stride, last.padding) == (1, 1, 0)
        assert first.bias is None and mid.bias is None and last.bias is not None

    def test_group_registered_and_contiguous(self):
        rng = np.random.default_rng(3)
        g = self._graph(rng)
        g2 = substitute_conv_tucker2(
            g, 0, tucker2_decompose(g.layers[0].weights, MultilinearRank2(6, 4))
        )
        group = g2.groups[0]
        assert group.scheme == "tucker2"
        assert group.ranks == (6, 4)
        assert group.orthonormal
        positions = [g2.position_of(i) for i in group.member_ids]
        assert positions == list(range(positions[0], positions[0] + 3))

    def test_double_substitution_rejected(self):
        rng = np.random.default_rng(4)
        g = self._graph(rng)
        f = tucker2_decompose(g.layers[0].weights, MultilinearRank2(6, 4))
        g2 = substitute_conv_tucker2(g, 0, f)
        with pytest.raises(ValueError):
            substitute_conv_tucker2(g2, 0, f)


class TestSubstituteCpd3:
    def _graph(self, rng):
        k = rng.standard_normal((3, 3, 12, 8))
        b = rng.standard_normal(12)
        return sequential(
            (10, 10, 8),
            [conv2d(3, 8, 12, padding=1, weights=k, bias=b), relu(), flatten()],
        )

    def test_rank_one_equivalence(self):
        rng = np.random.default_rng(5)
        g = self._graph(rng)
        f, _ = cpd3_decompose(reshape_kernel(g.layers[0].weights), 1)
        g2 = substitute_conv_cpd3(g, 0, f)
        assert g2.layers[1].kind == "grouped_conv2d"
        assert g2.layers[1].c_in == 1
        k_rec = restore_kernel(cpd3_reconstruct(f))
        g3 = sequential(
            (10, 10, 8),
            [conv2d(3, 8, 12, padding=1, weights=k_rec, bias=g.layers[0].bias),
             relu(), flatten()],
        )
        x = rng.standard_normal((3, 10, 10, 8))
        np.testing.assert_allclose(forward(g2, x)[0], forward(g3, x)[0], atol=1e-8)

    def test_planted_rank4_equivalence(self):
        rng = np.random.default_rng(6)
        f0 = CPFactors(
            rng.standard_normal((9, 4)),
            rng.standard_normal((12, 4)),
            rng.standard_normal((8, 4)),
        )
        k = restore_kernel(cpd3_reconstruct(f0))
        b = rng.standard_normal(12)
        g = sequential(
            (10, 10, 8),
            [conv2d(3, 8, 12, padding=1, weights=roundtrip32(k), bias=b), relu(), flatten()],
        )
        f, fit = cpd3_decompose(reshape_kernel(g.layers[0].weights), 4)
        assert fit.rel_error <= 1e-6
        g2 = substitute_conv_cpd3(g, 0, f)
        x = roundtrip32(rng.standard_normal((3, 10, 10, 8)))
        y1, _ = forward(g, x)
        y2, _ = forward(g2, x)
        assert np.max(np.abs(y1 - y2)) <= 1e-4 * max(1.0, np.max(np.abs(y1)))

    def test_param_count_formula(self):
        rng = np.random.default_rng(7)
        g = self._graph(rng)
        f, _ = cpd3_decompose(reshape_kernel(g.layers[0].weights), 5)
        g2 = substitute_conv_cpd3(g, 0, f)
        group = g2.groups[0]
        member_weights = sum(
            count_params(g2).per_layer[i][0] for i in group.member_ids
        )
        assert member_weights == 5 * (8 + 9 + 12)


class TestSubstituteFcSvd:
    def test_full_rank_exact(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((40, 12))
        b = rng.standard_normal(12)
        g = sequential((5, 8, 1), [flatten(), fc(40, 12, weights=w, bias=b)])
        g2 = substitute_fc_svd(g, 1, svd_decompose(w, 12))
        x = roundtrip32(rng.standard_normal((6, 5, 8, 1)))
        y1, _ = forward(g, x)
        y2, _ = forward(g2, x)
        assert np.max(np.abs(y1 - y2)) <= 1e-4 * max(1.0, np.max(np.abs(y1)))

    def test_truncated_matches_low_rank_product(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((128, 10))
        g = sequential((8, 16, 1), [flatten(), fc(128, 10, weights=w)])
        f = svd_decompose(w, 4)
        g2 = substitute_fc_svd(g, 1, f)
        g3 = sequential((8, 16, 1), [flatten(), fc(128, 10, weights=f.compose())])
        x = rng.standard_normal((5, 8, 16, 1))
        np.testing.assert_allclose(forward(g2, x)[0], forward(g3, x)[0], atol=1e-9)

    def test_param_count(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((128, 10))
        g = sequential((8, 16, 1), [flatten(), fc(128, 10, weights=w)])
        g2 = substitute_fc_svd(g, 1, svd_decompose(w, 4))
        assert count_params(g2).weight_total == 4 * (128 + 10)

    def test_bias_moves_to_second_member(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((20, 6))
        b = rng.standard_normal(6)
        g = sequential((4, 5, 1), [flatten(), fc(20, 6, weights=w, bias=b)])
        g2 = substitute_fc_svd(g, 1, svd_decompose(w, 3))
        members = [g2.layer_by_id(i) for i in g2.groups[0].member_ids]
        assert members[0].bias is None
        assert np.array_equal(members[1].bias, b)


class TestUpdateGroupWeights:
    def _decomposed(self, rng):
        k = rng.standard_normal((3, 3, 16, 12))
        g = sequential((8, 8, 12), [conv2d(3, 12, 16, padding=1, weights=k,
                                           bias=rng.standard_normal(16)), flatten()])
        return substitute_conv_tucker2(
            g, 0, tucker2_decompose(k, MultilinearRank2(8, 8))
        )

    def test_same_rank_same_weights(self):
        rng = np.random.default_rng(12)
        g = self._decomposed(rng)
        f = extract_group_factors(g, 0)
        g2 = update_group_weights(g, 0, f)
        for a, b in zip(g.layers, g2.layers):
            assert a.kind == b.kind
            if a.weights is not None:
                np.testing.assert_array_equal(a.weights, b.weights)

    def test_shrink_updates_member_shapes(self):
        rng = np.random.default_rng(13)
        g = self._decomposed(rng)
        f = tucker2_recompress(extract_group_factors(g, 0), MultilinearRank2(3, 5))
        g2 = update_group_weights(g, 0, f)
        first, mid, last = [g2.layer_by_id(i) for i in g2.groups[0].member_ids]
        assert first.weights.shape == (1, 1, 5, 12)
        assert mid.weights.shape == (3, 3, 3, 5)
        assert last.weights.shape == (1, 1, 16, 3)
        assert g2.groups[0].ranks == (3, 5)
        infer_shapes(g2)

    def test_rank_increase_rejected(self):
        rng = np.random.default_rng(14)
        g = self._decomposed(rng)
        k2 = rng.standard_normal((3, 3, 16, 12))
        bigger = tucker2_decompose(k2, MultilinearRank2(9, 8))
        with pytest.raises(ValueError):
            update_group_weights(g, 0, bigger)

    def test_svd_shrink(self):
        rng = np.random.default_rng(15)
        w = rng.standard_normal((30, 20))
        g = sequential((5, 6, 1), [flatten(), fc(30, 20, weights=w)])
        g2 = substitute_fc_svd(g, 1, svd_decompose(w, 10))
        from musco.decomp import svd_recompress

        g3 = update_group_weights(g2, 1, svd_recompress(extract_group_factors(g2, 1), 4))
        members = [g3.layer_by_id(i) for i in g3.groups[0].member_ids]
        assert members[0].weights.shape == (30, 4)
        assert members[1].weights.shape == (4, 20)


class TestCountParams:
    def test_big_conv(self):
        g = sequential((28, 28, 512), [conv2d(3, 512, 512, padding=1)])
        assert count_params(g).weight_total == 2_359_296

    def test_tucker_139(self):
        rng = np.random.default_rng(16)
        k = rng.standard_normal((3, 3, 512, 512))
        g = sequential((28, 28, 512), [conv2d(3, 512, 512, padding=1, weights=k)])
        g2 = substitute_conv_tucker2(
            g, 0, tucker2_decompose(k, MultilinearRank2(139, 139))
        )
        assert count_params(g2).weight_total == 316_225

    def test_fc(self):
        g = sequential((64, 64, 1), [flatten(), fc(4096, 1000)])
        assert count_params(g).weight_total == 4_096_000

    def test_bias_reported_separately(self):
        g = sequential(
            (8, 8, 3), [conv2d(3, 3, 4, padding=1, weights=np.zeros((3, 3, 4, 3)),
                               bias=np.zeros(4))]
        )
        counts = count_params(g)
        assert counts.weight_total == 108
        assert counts.bias_total == 4


class TestCountFlops:
    def test_vgg_conv1(self):
        g = sequential((224, 224, 3), [conv2d(3, 3, 64, padding=1)])
        assert count_flops(g).per_layer[0] == 86_704_128

    def test_vgg_conv2(self):
        g = sequential((224, 224, 64), [conv2d(3, 64, 64, padding=1)])
        assert count_flops(g).per_layer[0] == 1_849_688_064

    def test_resnet_stem(self):
        g = sequential((224, 224, 3), [conv2d(7, 3, 64, stride=2, padding=3)])
        assert count_flops(g).per_layer[0] == 118_013_952

    def test_decomposed_tucker_flops_formula(self):
        rng = np.random.default_rng(17)
        h = w = 28
        c_in, c_out, d, r_in, r_out = 32, 48, 3, 7, 9
        k = rng.standard_normal((d, d, c_out, c_in))
        g = sequential((h, w, c_in), [conv2d(d, c_in, c_out, padding=1, weights=k)])
        g2 = substitute_conv_tucker2(
            g, 0, tucker2_decompose(k, MultilinearRank2(r_out, r_in))
        )
        flops = count_flops(g2)
        total = sum(flops.per_layer[i] for i in g2.groups[0].member_ids)
        expected = h * w * c_in * r_in + h * w * (d * d * r_in * r_out + r_out * c_out)
        assert total == expected

    def test_depthwise_flops(self):
        g = sequential((10, 10, 7), [grouped_conv2d(3, 7, padding=1)])
        assert count_flops(g).per_layer[0] == 9 * 1 * 7 * 10 * 10

    def test_pool_relu_free(self):
        g = sequential((8, 8, 4), [relu(), maxpool2d(2), flatten()])
        assert count_flops(g).total == 0


class TestConstantRateRatioInvariant:
    def test_layer_ratio_at_least_alpha(self):
        rng = np.random.default_rng(18)
        from musco.rank_select import tucker2_rate_rank

        for c, alpha in ((64, 2.0), (128, 3.16)):
            k = rng.standard_normal((3, 3, c, c))
            g = sequential((14, 14, c), [conv2d(3, c, c, padding=1, weights=k)])
            rank = tucker2_rate_rank(c, c, 3, alpha)
            g2 = substitute_conv_tucker2(g, 0, tucker2_decompose(k, rank))
            before = count_params(g).weight_total
            after = count_params(g2).weight_total
            assert before / after >= alpha
