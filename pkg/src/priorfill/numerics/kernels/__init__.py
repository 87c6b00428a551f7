"""Convolution kernel backend selection.

Two interchangeable backends implement the three convolution routines: a
numpy one (im2col feeding BLAS matmuls) and a compiled direct-loop extension.
At this package's problem sizes (small spatial extents, wide channels) the
BLAS route measures faster across the board (see benchmarks/bench_kernels.py),
so it is the default; set PRIORFILL_BACKEND=cython to select the extension,
or PRIORFILL_BACKEND=python to pin the default explicitly. Both backends agree
within float rounding (kernel parity tests).
"""

import os

from . import fallback

_choice = os.environ.get("PRIORFILL_BACKEND", "python")
if os.environ.get("PRIORFILL_PURE_PYTHON") == "1":
    _choice = "python"

if _choice == "cython":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = fallback
else:
    _impl = fallback

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_weight_grad = _impl.conv2d_weight_grad
conv2d_input_grad = _impl.conv2d_input_grad
