"""Bilinear resampling with align-corners sampling.

Corner output samples map exactly onto corner input samples, so a grid of
normalized coordinates keeps hitting -1 and 1 at the corners after resizing,
and constant fields are preserved exactly.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, first_order_only, result_tensor


def _axis_coords(n_in: int, n_out: int):
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize [B, C, H, W] (or [C, H, W]) to the given spatial extents."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("output extents must be >= 1")
    squeeze = x.ndim == 3
    data = x.data[None] if squeeze else x.data
    if data.ndim != 4:
        raise ShapeError("bilinear_resize expects [B, C, H, W] or [C, H, W]")
    b, c, h, w = data.shape
    if (h, w) == (out_h, out_w):
        def bwd_id(dy):
            return (dy,)

        return result_tensor(x.data.copy(), (x,), bwd_id)

    ylo, yhi, fy = _axis_coords(h, out_h)
    xlo, xhi, fx = _axis_coords(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    w00 = ((1 - fy) * (1 - fx)).astype(data.dtype)
    w01 = ((1 - fy) * fx).astype(data.dtype)
    w10 = (fy * (1 - fx)).astype(data.dtype)
    w11 = (fy * fx).astype(data.dtype)

    out = (
        data[:, :, ylo[:, None], xlo[None, :]] * w00
        + data[:, :, ylo[:, None], xhi[None, :]] * w01
        + data[:, :, yhi[:, None], xlo[None, :]] * w10
        + data[:, :, yhi[:, None], xhi[None, :]] * w11
    )
    if squeeze:
        out = out[0]

    def bwd(dy):
        first_order_only("bilinear_resize")
        d = dy.data[None] if squeeze else dy.data
        dx = np.zeros((b, c, h, w), dtype=data.dtype)
        for wgt, yi, xi in (
            (w00, ylo, xlo),
            (w01, ylo, xhi),
            (w10, yhi, xlo),
            (w11, yhi, xhi),
        ):
            np.add.at(dx, (slice(None), slice(None), yi[:, None], xi[None, :]), d * wgt)
        return (Tensor(dx[0] if squeeze else dx),)

    return result_tensor(np.ascontiguousarray(out), (x,), bwd)
