"""Convolution tests: nested-loop oracle, adjointness, kernels parity, gradchecks."""

import numpy as np
import pytest

from priorfill.errors import ShapeError
from priorfill.numerics import Tensor, backward, ops, conv2d, deconv2d, precision
from priorfill.numerics.gradcheck import gradcheck
from priorfill.numerics.kernels import fallback

try:
    from priorfill.numerics.kernels import _ckernels
except ImportError:
    _ckernels = None


def conv_oracle(x, w, bias, stride, pad, groups):
    """Direct nested-loop cross-correlation."""
    b, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    og = o // groups
    y = np.zeros((b, o, oh, ow), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            g = oi // og
            for yy in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        for ki in range(kh):
                            for kj in range(kw):
                                ih = yy * stride + ki - pad
                                iw = xx * stride + kj - pad
                                if 0 <= ih < h and 0 <= iw < wd:
                                    acc += x[bi, g * cg + ci, ih, iw] * w[oi, ci, ki, kj]
                    y[bi, oi, yy, xx] = acc + (bias[oi] if bias is not None else 0.0)
    return y


class TestConvForward:
    def test_one_by_one_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 1, 5, 5)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = conv2d(x, w)
        assert np.array_equal(out.data, x.data)

    def test_zero_weights_give_bias(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32))
        w = Tensor(np.zeros((5, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.arange(5, dtype=np.float32))
        out = conv2d(x, w, b, pad=1)
        for oi in range(5):
            assert np.all(out.data[:, oi] == oi)

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 1), (2, 2, 2), (1, 1, 2)])
    def test_against_nested_loop_oracle(self, stride, pad, groups):
        rng = np.random.default_rng(2)
        with precision("float64"):
            x = rng.standard_normal((2, 4, 7, 6))
            w = rng.standard_normal((6, 4 // groups, 3, 3))
            b = rng.standard_normal(6)
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad, groups=groups)
        ref = conv_oracle(x, w, b, stride, pad, groups)
        assert np.abs(out.data - ref).max() < 1e-6

    def test_spec_case_1x2x5x5(self):
        rng = np.random.default_rng(3)
        with precision("float64"):
            x = rng.standard_normal((1, 2, 5, 5))
            w = rng.standard_normal((3, 2, 3, 3))
            out = conv2d(Tensor(x), Tensor(w), pad=1)
        assert np.abs(out.data - conv_oracle(x, w, None, 1, 1, 1)).max() < 1e-6

    def test_kernel_larger_than_input_raises(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))))

    def test_group_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 3, 3, 3))), groups=2)


class TestConvBackward:
    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        with precision("float64"):
            x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.standard_normal(3), requires_grad=True)
            target = Tensor(rng.standard_normal((1, 3, 5, 5)))

            def f(x, w, b):
                return ops.tmean(ops.square(ops.sub(conv2d(x, w, b, pad=1), target)))

            err = gradcheck(f, [x, w, b])
        assert err < 1e-4

    def test_strided_grouped_gradcheck(self):
        rng = np.random.default_rng(5)
        with precision("float64"):
            x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
            err = gradcheck(
                lambda x, w: ops.tsum(ops.square(conv2d(x, w, stride=2, pad=1, groups=2))), [x, w]
            )
        assert err < 1e-4


class TestDeconv:
    def test_stride2_doubles_extent(self):
        x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32))
        w = Tensor(np.ones((2, 3, 4, 4), dtype=np.float32))
        out = deconv2d(x, w, stride=2, pad=1)
        assert out.shape == (1, 3, 8, 8)

    def test_adjoint_of_conv(self):
        # <conv(x), y> == <x, deconv(y)> with shared weights
        rng = np.random.default_rng(6)
        with precision("float64"):
            x = rng.standard_normal((2, 3, 8, 8))
            w = rng.standard_normal((5, 3, 4, 4))
            y = rng.standard_normal((2, 5, 4, 4))
            cx = conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
            # deconv weight layout is [Cin, Cout, kh, kw]; conv maps 3->5 so
            # the adjoint maps 5->3 with the identical array
            dy = deconv2d(Tensor(y), Tensor(w), stride=2, pad=1)
            lhs = float((cx.data * y).sum())
            rhs = float((x * dy.data).sum())
        assert abs(lhs - rhs) < 1e-5

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        with precision("float64"):
            x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal(2), requires_grad=True)
            err = gradcheck(
                lambda x, w, b: ops.tsum(ops.square(deconv2d(x, w, b, stride=2, pad=1))), [x, w, b]
            )
        assert err < 1e-4

    def test_empty_output_rejected(self):
        with pytest.raises(ShapeError):
            deconv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=1, pad=2)


class TestDoubleBackprop:
    def test_penalty_through_conv_matches_closed_form(self):
        # "linear discriminator" = single conv summing the image: grad w.r.t.
        # the input is the kernel, so the penalty is ||w||^2 per sample
        from priorfill.numerics import grad_of

        rng = np.random.default_rng(8)
        with precision("float64"):
            w = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
            x = Tensor(rng.standard_normal((3, 1, 4, 4)), requires_grad=True)
            out = ops.tsum(conv2d(x, w))
            (g,) = grad_of(out, [x], create_graph=True)
            penalty = ops.scale(ops.tsum(ops.square(g)), 1.0 / 3.0)
            assert penalty.item() == pytest.approx(float((w.data**2).sum()), rel=1e-10)
            backward(penalty)
            assert np.allclose(w.grad.data, 2.0 * w.data)


@pytest.mark.skipif(_ckernels is None, reason="compiled kernels unavailable")
class TestKernelParity:
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 2), (1, 0, 1), (3, 2, 1)])
    def test_all_three_kernels_agree(self, dtype, tol, stride, pad, groups):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 4, 9, 8)).astype(dtype)
        w = rng.standard_normal((6, 4 // groups, 3, 3)).astype(dtype)
        y_f = fallback.conv2d_forward(x, w, stride, pad, groups)
        y_c = _ckernels.conv2d_forward(x, w, stride, pad, groups)
        assert np.abs(y_f - y_c).max() < tol
        dy = rng.standard_normal(y_f.shape).astype(dtype)
        dw_f = fallback.conv2d_weight_grad(x, dy, 3, 3, stride, pad, groups)
        dw_c = _ckernels.conv2d_weight_grad(x, dy, 3, 3, stride, pad, groups)
        assert np.abs(dw_f - dw_c).max() < tol * 10
        dx_f = fallback.conv2d_input_grad(dy, w, 9, 8, stride, pad, groups)
        dx_c = _ckernels.conv2d_input_grad(dy, w, 9, 8, stride, pad, groups)
        assert np.abs(dx_f - dx_c).max() < tol * 10
