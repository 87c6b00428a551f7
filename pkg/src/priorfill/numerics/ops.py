"""Primitive differentiable operations.

Broadcasting is restricted to numpy's singleton-axis stretching; gradients of
broadcast operands are reduced back with ``_sum_to``. Backward rules that are
built from other primitives stay differentiable (needed for the gradient
penalty); rules that drop to raw numpy call ``first_order_only`` so a second
differentiation fails loudly instead of silently returning constants.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from ..errors import ContractError, ShapeError
from .tensor import Tensor, first_order_only, result_tensor

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast") from None


def _sum_to_data(arr: np.ndarray, shape) -> np.ndarray:
    """Reduce ``arr`` back to ``shape`` by summing broadcast axes."""
    if arr.shape == tuple(shape):
        return arr
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum-reduce to a broadcast-compatible target shape."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _sum_to_data(a.data, shape)

    def bwd(dy):
        first_order_only("sum_to")
        return (Tensor(np.broadcast_to(dy.data, a.shape).copy()),)

    return result_tensor(out, (a,), bwd)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast to a larger shape (singleton-axis stretching only)."""
    shape = tuple(shape)
    _check_broadcast(a.shape, shape)

    def bwd(dy):
        return (sum_to(dy, a.shape),)

    return result_tensor(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(dy):
        return (sum_to(dy, a.shape), sum_to(dy, b.shape))

    return result_tensor(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(dy):
        return (sum_to(dy, a.shape), sum_to(neg(dy), b.shape))

    return result_tensor(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(dy):
        return (sum_to(mul(dy, b), a.shape), sum_to(mul(dy, a), b.shape))

    return result_tensor(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(dy):
        return (neg(dy),)

    return result_tensor(-a.data, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no gradient for the scalar)."""
    s = float(s)

    def bwd(dy):
        return (scale(dy, s),)

    return result_tensor(a.data * s, (a,), bwd)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def bwd(dy):
        first_order_only("reciprocal")
        return (Tensor(-dy.data * out * out),)

    return result_tensor(out, (a,), bwd)


def binary_elementwise(a, b, kind: str) -> Tensor:
    """Dispatch helper covering the basic broadcasting arithmetic ops."""
    table = {"add": add, "sub": sub, "mul": mul}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](a, b)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])

    def bwd(dy):
        first_order_only("matmul")
        da = _sum_to_data(dy.data @ np.swapaxes(b.data, -1, -2), a.shape)
        db = _sum_to_data(np.swapaxes(a.data, -1, -2) @ dy.data, b.shape)
        return (Tensor(da), Tensor(db))

    return result_tensor(a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(dy):
        return (reshape(dy, a.shape),)

    return result_tensor(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(dy):
        return (transpose(dy, inv),)

    return result_tensor(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(dy):
        outs = []
        for i, t in enumerate(tensors):
            idx = [slice(None)] * dy.ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(getitem(dy, tuple(idx)))
        return tuple(outs)

    return result_tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; backward scatters into zeros."""
    out = a.data[idx]

    def bwd(dy):
        first_order_only("getitem")
        da = np.zeros_like(a.data)
        da[idx] = dy.data
        return (Tensor(da),)

    return result_tensor(np.ascontiguousarray(out), (a,), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows per batch: a[B, T, D], idx[B, U] -> [B, U, D]."""
    idx = np.asarray(idx)
    batch = np.arange(a.shape[0])[:, None]
    out = a.data[batch, idx]

    def bwd(dy):
        first_order_only("gather_rows")
        da = np.zeros_like(a.data)
        np.add.at(da, (batch, idx), dy.data)
        return (Tensor(da),)

    return result_tensor(np.ascontiguousarray(out), (a,), bwd)


def scatter_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows at ``idx`` replaced by ``values`` (per batch)."""
    idx = np.asarray(idx)
    batch = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[batch, idx] = values.data

    def bwd(dy):
        first_order_only("scatter_rows")
        dbase = dy.data.copy()
        dbase[batch, idx] = 0.0
        dvals = dy.data[batch, idx]
        return (Tensor(dbase), Tensor(np.ascontiguousarray(dvals)))

    return result_tensor(out, (base, values), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None and a.ndim == 0:
        return a
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(dy):
        d = dy.data
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = [1 if i in axes else s for i, s in enumerate(a.shape)]
            d = d.reshape(shape)
        return (expand(Tensor(d), a.shape),)

    return result_tensor(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# pointwise nonlinear functions


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(dy):
        first_order_only("exp")
        return (Tensor(dy.data * out),)

    return result_tensor(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(dy):
        first_order_only("log")
        return (Tensor(dy.data / a.data),)

    return result_tensor(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(dy):
        first_order_only("sqrt")
        return (Tensor(dy.data * (0.5 / out)),)

    return result_tensor(out, (a,), bwd)


def clamp(a: Tensor, min_v: Optional[float] = None, max_v: Optional[float] = None) -> Tensor:
    out = np.clip(a.data, min_v, max_v)
    pass_mask = np.ones_like(a.data)
    if min_v is not None:
        pass_mask *= a.data >= min_v
    if max_v is not None:
        pass_mask *= a.data <= max_v

    def bwd(dy):
        return (mul(dy, Tensor(pass_mask)),)

    return result_tensor(out, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bwd(dy):
        return (mul(dy, Tensor(sign)),)

    return result_tensor(np.abs(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)

    def bwd(dy):
        return (mul(dy, Tensor(mask)),)

    return result_tensor(a.data * mask, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))

    def bwd(dy):
        return (mul(dy, Tensor(mask)),)

    return result_tensor(a.data * mask, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(dy):
        first_order_only("sigmoid")
        return (Tensor(dy.data * out * (1.0 - out)),)

    return result_tensor(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(dy):
        first_order_only("tanh")
        return (Tensor(dy.data * (1.0 - out * out)),)

    return result_tensor(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def bwd(dy):
        first_order_only("gelu")
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (Tensor((dy.data * (cdf + x * pdf)).astype(x.dtype)),)

    return result_tensor(out, (a,), bwd)


def activation(a: Tensor, kind: str) -> Tensor:
    """Activation dispatch: relu, leaky_relu (slope 0.2), sigmoid, gelu, tanh."""
    table = {
        "relu": relu,
        "leaky_relu": leaky_relu,
        "sigmoid": sigmoid,
        "gelu": gelu,
        "tanh": tanh,
    }
    if kind not in table:
        raise ValueError(f"unknown activation {kind!r}")
    return table[kind](a)


# ---------------------------------------------------------------------------
# softmax and normalization


def softmax_lastdim(a: Tensor, neg_inf_mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-stabilized softmax over the last axis.

    ``neg_inf_mask`` (1 = masked) removes entries from the normalization;
    masked outputs are exactly zero. A mask covering the whole last axis is a
    contract violation because no row could normalize.
    """
    x = a.data
    if neg_inf_mask is not None:
        m = np.broadcast_to(np.asarray(neg_inf_mask, dtype=bool), x.shape)
        if not (~m).any(axis=-1).all():
            raise ContractError("softmax mask leaves a row with no unmasked entry")
        shifted = np.where(m, -np.inf, x)
        mx = shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted - mx)
        e[m] = 0.0
    else:
        mx = x.max(axis=-1, keepdims=True)
        e = np.exp(x - mx)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(dy):
        first_order_only("softmax_lastdim")
        g = dy.data * out
        d = g - out * g.sum(axis=-1, keepdims=True)
        return (Tensor(d),)

    return result_tensor(out.astype(x.dtype), (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(dy):
        first_order_only("layer_norm")
        d = dy.data
        dgamma = _sum_to_data(d * xhat, gamma.shape)
        dbeta = _sum_to_data(d, beta.shape)
        dxhat = d * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (Tensor(dx.astype(x.dtype)), Tensor(dgamma), Tensor(dbeta))

    return result_tensor(out.astype(x.dtype), (x, gamma, beta), bwd)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm for [B, C, H, W] inputs.

    Training mode normalizes with batch statistics over (B, H, W) and updates
    the running buffers in place; eval mode normalizes with the buffers.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm expects [B, C, H, W]")
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ShapeError("batch_norm reduction axis is empty")
    axes = (0, 2, 3)
    c = x.shape[1]
    g = gamma.data.reshape(1, c, 1, 1)
    b = beta.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        xc = x.data - mu
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g + b

    def bwd(dy):
        first_order_only("batch_norm")
        d = dy.data
        dgamma = (d * xhat).sum(axis=axes)
        dbeta = d.sum(axis=axes)
        dxhat = d * g
        if training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            dx = inv * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return (Tensor(dx.astype(x.dtype)), Tensor(dgamma.astype(x.dtype)), Tensor(dbeta.astype(x.dtype)))

    return result_tensor(out.astype(x.dtype), (x, gamma, beta), bwd)


def norm(x: Tensor, kind: str, **kwargs) -> Tensor:
    """Normalization dispatch mirroring the activation helper."""
    if kind == "layer_norm":
        return layer_norm(x, **kwargs)
    if kind == "batch_norm":
        return batch_norm(x, **kwargs)
    raise ValueError(f"unknown norm {kind!r}")


# ---------------------------------------------------------------------------
# operator wiring


def _install_operators():
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = lambda self, other: mul(self, other)
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__matmul__ = lambda self, other: matmul(self, other)
    Tensor.__getitem__ = lambda self, idx: getitem(self, idx)


_install_operators()
