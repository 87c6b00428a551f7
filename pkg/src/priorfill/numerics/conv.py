"""2D convolution and transposed convolution as differentiable primitives.

The three kernel routines (forward, input grad, weight grad) are mutually
adjoint, so each primitive's backward rule is built from the other two as
recorded ops. That keeps convolution double-backprop capable, which the
discriminator gradient penalty relies on.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ShapeError
from . import kernels
from .tensor import Tensor, result_tensor


def _contig(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.data)


def _check_conv_shapes(x: Tensor, w: Tensor, stride: int, pad: int, groups: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[O,C/g,kh,kw]")
    b, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d needs stride >= 1 and pad >= 0")
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(f"channels {c} (groups {groups}) incompatible with weight {tuple(w.shape)}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if kh > h + 2 * pad or kw > wd + 2 * pad or oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    return oh, ow


def _conv_fwd_op(x: Tensor, w: Tensor, stride: int, pad: int, groups: int) -> Tensor:
    h, wd = x.shape[2], x.shape[3]
    kh, kw = w.shape[2], w.shape[3]
    y = kernels.conv2d_forward(_contig(x), _contig(w), stride, pad, groups)

    def bwd(dy):
        return (
            _input_grad_op(dy, w, h, wd, stride, pad, groups),
            _weight_grad_op(x, dy, kh, kw, stride, pad, groups),
        )

    return result_tensor(y, (x, w), bwd)


def _input_grad_op(dy: Tensor, w: Tensor, h: int, wd: int, stride: int, pad: int, groups: int) -> Tensor:
    kh, kw = w.shape[2], w.shape[3]
    dx = kernels.conv2d_input_grad(_contig(dy), _contig(w), h, wd, stride, pad, groups)

    def bwd(up):
        return (
            _conv_fwd_op(up, w, stride, pad, groups),
            _weight_grad_op(up, dy, kh, kw, stride, pad, groups),
        )

    return result_tensor(dx, (dy, w), bwd)


def _weight_grad_op(x: Tensor, dy: Tensor, kh: int, kw: int, stride: int, pad: int, groups: int) -> Tensor:
    h, wd = x.shape[2], x.shape[3]
    dw = kernels.conv2d_weight_grad(_contig(x), _contig(dy), kh, kw, stride, pad, groups)

    def bwd(up):
        return (
            _input_grad_op(dy, up, h, wd, stride, pad, groups),
            _conv_fwd_op(x, up, stride, pad, groups),
        )

    return result_tensor(dw, (x, dy), bwd)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation with zero padding.

    x: [B, C, H, W], w: [O, C/groups, kh, kw], bias: [O].
    Output spatial size is floor((H + 2 pad - kh) / stride) + 1.
    """
    _check_conv_shapes(x, w, stride, pad, groups)
    y = _conv_fwd_op(x, w, stride, pad, groups)
    if bias is not None:
        from .ops import add, reshape

        y = add(y, reshape(bias, (1, bias.shape[0], 1, 1)))
    return y


def deconv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Transposed convolution (adjoint of conv2d with the same stride/pad).

    x: [B, Cin, H, W], w: [Cin, Cout, kh, kw], bias: [Cout].
    Output spatial size is (H - 1) * stride - 2 pad + kh; a 4x4 kernel with
    stride 2 and pad 1 doubles the extent exactly.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("deconv2d expects x[B,Cin,H,W] and w[Cin,Cout,kh,kw]")
    cin, cout, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"deconv2d channel mismatch: input {x.shape[1]} vs weight {cin}")
    if stride < 1 or pad < 0:
        raise ShapeError("deconv2d needs stride >= 1 and pad >= 0")
    oh = (x.shape[2] - 1) * stride - 2 * pad + kh
    ow = (x.shape[3] - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv2d output extent {oh}x{ow} is empty for stride {stride}, pad {pad}")
    # Viewing w as a conv weight [O=Cin, C=Cout, kh, kw], the transposed
    # convolution is exactly the conv input-gradient kernel.
    y = _input_grad_op(x, w, oh, ow, stride, pad, 1)
    if bias is not None:
        from .ops import add, reshape

        y = add(y, reshape(bias, (1, bias.shape[0], 1, 1)))
    return y


def dilate_weight(w: np.ndarray, dilation: int) -> np.ndarray:
    """Insert zeros between kernel taps (for frozen dilated-conv extractors)."""
    if dilation == 1:
        return w
    o, c, kh, kw = w.shape
    out = np.zeros((o, c, (kh - 1) * dilation + 1, (kw - 1) * dilation + 1), dtype=w.dtype)
    out[:, :, ::dilation, ::dilation] = w
    return out
