"""Radix-2 2D FFT with unitary normalization, differentiable both ways.

Extents must be powers of two. Transforms run internally in complex128 and
cast back to the input float width, so the roundtrip error stays at cast
level. The gradient of the forward transform is the real part of the inverse
transform applied to the cotangent (and vice versa), because the unitary DFT's
adjoint is its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError, UnsupportedSizeError
from .tensor import Tensor, first_order_only, result_tensor
from . import ops

_REV_CACHE: dict[int, np.ndarray] = {}
_TWIDDLE_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _bit_reverse_indices(n: int) -> np.ndarray:
    idx = _REV_CACHE.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            idx[i] = r
        _REV_CACHE[n] = idx
    return idx


def _twiddle(n: int, m: int, sign: int) -> np.ndarray:
    key = (n, m, sign)
    tw = _TWIDDLE_CACHE.get(key)
    if tw is None:
        tw = np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)
        _TWIDDLE_CACHE[key] = tw
    return tw


def _check_pow2(n: int) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise UnsupportedSizeError(f"extent {n} is not a power of two")


def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative Cooley-Tukey over the last axis; unitary (1/sqrt(N)) scaling."""
    n = a.shape[-1]
    _check_pow2(n)
    sign = 1 if inverse else -1
    out = a[..., _bit_reverse_indices(n)].astype(np.complex128, copy=True)
    m = 2
    while m <= n:
        half = m // 2
        tw = _twiddle(n, m, sign)
        blocks = out.reshape(a.shape[:-1] + (n // m, m))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        m *= 2
    out *= 1.0 / np.sqrt(n)
    return out


def _fft2_core(a: np.ndarray, inverse: bool) -> np.ndarray:
    """2D transform over the last two axes."""
    _check_pow2(a.shape[-2])
    out = _fft_last_axis(a, inverse)
    out = np.moveaxis(_fft_last_axis(np.moveaxis(out, -1, -2), inverse), -1, -2)
    return out


@dataclass
class ComplexGrid:
    """Spectral-domain value: real and imaginary parts as same-shaped tensors."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError("ComplexGrid real/imag shapes differ")

    @property
    def shape(self):
        return self.real.shape


def _fft2d_stacked(x: Tensor) -> Tensor:
    """[B, C, H, W] real -> [B, 2C, H, W] with real parts then imaginary parts."""
    if x.ndim != 4:
        raise ShapeError("fft2d expects [B, C, H, W]")
    spec = _fft2_core(x.data, inverse=False)
    out = np.concatenate([spec.real, spec.imag], axis=1).astype(x.dtype)

    def bwd(dy):
        first_order_only("fft2d")
        c = x.shape[1]
        cot = dy.data[:, :c] + 1j * dy.data[:, c:]
        dx = _fft2_core(cot, inverse=True).real.astype(x.dtype)
        return (Tensor(dx),)

    return result_tensor(out, (x,), bwd)


def _ifft2d_stacked(z: Tensor) -> Tensor:
    """[B, 2C, H, W] stacked spectrum -> [B, C, H, W] real part of the inverse."""
    if z.ndim != 4 or z.shape[1] % 2:
        raise ShapeError("ifft2d expects stacked [B, 2C, H, W]")
    c = z.shape[1] // 2
    spec = z.data[:, :c] + 1j * z.data[:, c:]
    out = _fft2_core(spec, inverse=True).real.astype(z.dtype)

    def bwd(dy):
        first_order_only("ifft2d")
        spec_d = _fft2_core(dy.data, inverse=False)
        dz = np.concatenate([spec_d.real, spec_d.imag], axis=1).astype(z.dtype)
        return (Tensor(dz),)

    return result_tensor(out, (z,), bwd)


def fft2d(x: Tensor) -> ComplexGrid:
    """Unitary 2D DFT per channel of a [B, C, H, W] tensor."""
    stacked = _fft2d_stacked(x)
    c = x.shape[1]
    return ComplexGrid(real=stacked[:, :c], imag=stacked[:, c:])


def ifft2d(grid: ComplexGrid) -> Tensor:
    """Real part of the unitary inverse 2D DFT."""
    stacked = ops.concat([grid.real, grid.imag], axis=1)
    return _ifft2d_stacked(stacked)
