"""Pure-numpy convolution kernels (im2col + BLAS).

These mirror the compiled kernels in ``_ckernels.pyx`` and are used when the
extension is unavailable or disabled. The three routines are mutually adjoint:
``conv2d_input_grad`` is also the forward pass of a transposed convolution.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

BACKEND = "python"


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view [B, C, kh, kw, OH, OW] over the padded input."""
    b, c, hp, wp = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int) -> np.ndarray:
    b, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    oh, ow = _out_extent(h, kh, stride, pad), _out_extent(wd, kw, stride, pad)
    xp = _zero_pad(x, pad)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    og = o // groups
    y = np.empty((b, o, oh, ow), dtype=x.dtype)
    for g in range(groups):
        cg_sl = slice(g * cg, (g + 1) * cg)
        og_sl = slice(g * og, (g + 1) * og)
        # [Og, B, OH, OW] <- w[Og, Cg, kh, kw] . cols[B, Cg, kh, kw, OH, OW]
        yg = np.tensordot(w[og_sl], cols[:, cg_sl], axes=([1, 2, 3], [1, 2, 3]))
        y[:, og_sl] = yg.transpose(1, 0, 2, 3)
    return y


def conv2d_weight_grad(
    x: np.ndarray, dy: np.ndarray, kh: int, kw: int, stride: int, pad: int, groups: int
) -> np.ndarray:
    b, c, h, wd = x.shape
    _, o, oh, ow = dy.shape
    xp = _zero_pad(x, pad)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    cg, og = c // groups, o // groups
    dw = np.empty((o, cg, kh, kw), dtype=x.dtype)
    for g in range(groups):
        cg_sl = slice(g * cg, (g + 1) * cg)
        og_sl = slice(g * og, (g + 1) * og)
        dw[og_sl] = np.tensordot(dy[:, og_sl], cols[:, cg_sl], axes=([0, 2, 3], [0, 4, 5]))
    return dw


def conv2d_input_grad(
    dy: np.ndarray, w: np.ndarray, h: int, wd: int, stride: int, pad: int, groups: int
) -> np.ndarray:
    b, o, oh, ow = dy.shape
    _, cg, kh, kw = w.shape
    c = cg * groups
    og = o // groups
    dxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for g in range(groups):
        cg_sl = slice(g * cg, (g + 1) * cg)
        og_sl = slice(g * og, (g + 1) * og)
        # dcols[Cg, kh, kw, B, OH, OW] <- w[Og, Cg, kh, kw] . dy[B, Og, OH, OW]
        dcols = np.tensordot(w[og_sl], dy[:, og_sl], axes=([0], [1]))
        for i in range(kh):
            for j in range(kw):
                dxp[:, cg_sl, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[
                    :, i, j
                ].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wd])
    return dxp
