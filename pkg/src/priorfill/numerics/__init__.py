"""Minimal dense-tensor engine: autodiff, convolutions, FFT, resampling."""

import os

# The arrays here are small enough that BLAS thread pools cost more than they
# save (measured ~1.7x slower at 4 threads); keep GEMMs single-threaded unless
# the user overrides.
if os.environ.get("PRIORFILL_BLAS_THREADS") != "keep":
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=1)
    except ImportError:
        pass

from .tensor import (
    Tensor,
    backward,
    default_dtype,
    grad_of,
    is_grad_enabled,
    no_grad,
    precision,
)
from . import ops
from .conv import conv2d, deconv2d
from .fft import ComplexGrid, fft2d, ifft2d
from .resize import bilinear_resize
from .kernels import BACKEND as KERNEL_BACKEND

__all__ = [
    "Tensor",
    "backward",
    "grad_of",
    "no_grad",
    "precision",
    "default_dtype",
    "is_grad_enabled",
    "ops",
    "conv2d",
    "deconv2d",
    "ComplexGrid",
    "fft2d",
    "ifft2d",
    "bilinear_resize",
    "KERNEL_BACKEND",
]
