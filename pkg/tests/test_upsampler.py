"""Injection branch tests: coordinate grid, resize+concat, gated pyramid,
zero-init blending."""

import numpy as np
import pytest

from priorfill.errors import ShapeError
from priorfill.mae import MaePriors
from priorfill.numerics import Tensor, ops, precision
from priorfill.numerics.gradcheck import gradcheck, max_rel_error, numeric_grad
from priorfill.upsampler import (
    GatedConvBlock,
    GatedDeconvBlock,
    PriorUpsampler,
    build_fp_prime,
    cartesian_grid,
    inject,
)


def make_priors(rng, gh=4, gw=4, d=16):
    feats = Tensor(rng.standard_normal((gh, gw, d)).astype(np.float32))
    att = np.zeros((gh * gw, gh * gw), dtype=np.float32)
    return MaePriors(features=feats, attention=Tensor(att), grid=(gh, gw))


class TestCartesianGrid:
    def test_corner_values(self):
        g = cartesian_grid(5, 7).data
        assert g[0, 0, 0] == -1 and g[0, 0, -1] == 1  # x channel
        assert g[1, 0, 0] == -1 and g[1, -1, 0] == 1  # y channel

    def test_flip_antisymmetry(self):
        g = cartesian_grid(6, 6).data
        assert np.allclose(g[0], -g[0, :, ::-1])
        assert np.allclose(g[1], -g[1, ::-1, :])


class TestBuildFpPrime:
    def test_channel_count_and_shape(self):
        rng = np.random.default_rng(0)
        priors = make_priors(rng, d=16)
        out = build_fp_prime(priors, 32, 32)
        assert out.shape == (18, 4, 4)

    def test_constant_features_survive_resize(self):
        priors = MaePriors(
            features=Tensor(np.full((4, 4, 3), 2.5, dtype=np.float32)),
            attention=Tensor(np.zeros((16, 16), dtype=np.float32)),
        )
        out = build_fp_prime(priors, 64, 64)  # resize 4x4 -> 8x8
        assert np.abs(out.data[:3] - 2.5).max() < 1e-6

    def test_grid_corners(self):
        rng = np.random.default_rng(1)
        out = build_fp_prime(make_priors(rng), 32, 32).data
        x_ch, y_ch = out[-2], out[-1]
        assert {x_ch[0, 0], x_ch[0, -1]} == {-1.0, 1.0}
        assert {y_ch[0, 0], y_ch[-1, 0]} == {-1.0, 1.0}

    def test_indivisible_extent_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            build_fp_prime(make_priors(rng), 30, 32)


class TestGatedPyramid:
    def test_spatial_sizes(self):
        rng = np.random.default_rng(3)
        ups = PriorUpsampler(rng, 18, (8, 12, 16, 16))
        fp = Tensor(rng.standard_normal((1, 18, 4, 4)).astype(np.float32))
        p1, p2, p3, p4 = ups(fp)
        assert p1.shape == (1, 16, 4, 4)
        assert p2.shape == (1, 16, 8, 8)
        assert p3.shape == (1, 12, 16, 16)
        assert p4.shape == (1, 8, 32, 32)

    def test_gate_in_open_interval(self):
        rng = np.random.default_rng(4)
        blk = GatedDeconvBlock(rng, 6, 8)
        x = Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
        gate = blk.gate_activations(x)
        assert np.all(gate.data > 0) and np.all(gate.data < 1)

    def test_large_negative_gate_bias_silences_output(self):
        rng = np.random.default_rng(5)
        blk = GatedConvBlock(rng, 4, 6)
        blk.eval()  # use running stats so the norm cannot rescale the tiny signal
        blk.gate.b.data = np.full(6, -30.0, dtype=np.float32)
        x = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        out = blk(x)
        assert np.abs(out.data).max() < 1e-3

    def test_gated_block_gradcheck(self):
        with precision("float64"):
            rng = np.random.default_rng(6)
            blk = GatedDeconvBlock(rng, 3, 4)
            x_in = Tensor(rng.standard_normal((1, 3, 3, 3)))
            params = list(blk.named_parameters().values())
            w = Tensor(rng.standard_normal((1, 4, 6, 6)))

            def f(*_p):
                return ops.tsum(ops.mul(blk(x_in), w))

            assert gradcheck(f, params) < 1e-3


class TestInject:
    def test_alpha_zero_keeps_features_bit_identical(self):
        rng = np.random.default_rng(7)
        feats = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        p = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        out = inject(feats, p, Tensor(np.zeros((), dtype=np.float32)))
        assert np.array_equal(out.data, feats.data)

    def test_alpha_one_is_elementwise_sum(self):
        rng = np.random.default_rng(8)
        feats = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        p = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        out = inject(feats, p, Tensor(np.ones((), dtype=np.float32)))
        assert np.allclose(out.data, feats.data + p.data, atol=1e-7)

    def test_alpha_gradient_is_injection_map(self):
        with precision("float64"):
            rng = np.random.default_rng(9)
            feats = Tensor(rng.standard_normal((1, 2, 4, 4)))
            p = Tensor(rng.standard_normal((1, 2, 4, 4)))
            alpha = Tensor(np.zeros(()), requires_grad=True)
            from priorfill.numerics import backward

            out = ops.tsum(inject(feats, p, alpha))
            backward(out)
            assert abs(alpha.grad.item() - p.data.sum()) < 1e-9
            numeric = numeric_grad(lambda: ops.tsum(inject(feats, p, alpha)), alpha)
            assert max_rel_error(np.asarray(alpha.grad.data), numeric) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            inject(
                Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 8, 8))),
                Tensor(np.zeros(())),
            )

    def test_alpha_params_start_at_exact_zero(self):
        ups = PriorUpsampler(np.random.default_rng(10), 18, (8, 12, 16, 16))
        assert ups.alpha_values() == [0.0, 0.0, 0.0, 0.0]
        for a in ups.alphas:
            assert a.requires_grad
