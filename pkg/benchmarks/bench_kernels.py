"""Benchmark the two convolution kernel backends on this package's shapes.

Run:  python3 benchmarks/bench_kernels.py

The numpy backend lowers convolution to im2col plus BLAS matmuls; the
compiled backend runs direct loops. At the small spatial extents and wide
channel counts used here, BLAS wins consistently, which is why the numpy
backend is the default (see priorfill.numerics.kernels).
"""

import time

import numpy as np

from priorfill.numerics.kernels import fallback

try:
    from priorfill.numerics.kernels import _ckernels
except ImportError:
    _ckernels = None

# (label, x shape, w shape, stride, pad, groups)
SHAPES = [
    ("stem 4->32 k3 s1 32px", (1, 4, 32, 32), (32, 4, 3, 3), 1, 1, 1),
    ("down 32->64 k3 s2 16px", (1, 32, 16, 16), (64, 32, 3, 3), 2, 1, 1),
    ("ffc local 64->64 k3 4px", (1, 64, 4, 4), (64, 64, 3, 3), 1, 1, 1),
    ("spectral 128->128 k1 4px", (1, 128, 4, 4), (128, 128, 1, 1), 1, 0, 1),
    ("disc 64->128 k4 s2 8px", (1, 64, 8, 8), (128, 64, 4, 4), 2, 1, 1),
    ("batch8 stem 4->32 k3 32px", (8, 4, 32, 32), (32, 4, 3, 3), 1, 1, 1),
    ("hi-res 32->64 k3 64px", (1, 32, 64, 64), (64, 32, 3, 3), 1, 1, 1),
]


def bench(fn, *args, repeats=30):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e3


def run(dtype):
    rng = np.random.default_rng(0)
    print(f"\n== {np.dtype(dtype).name} ==")
    header = f"{'case':28s} {'direction':8s} {'numpy ms':>9s} {'cython ms':>10s} {'ratio':>6s}"
    print(header)
    print("-" * len(header))
    for label, xs, ws, stride, pad, groups in SHAPES:
        x = rng.standard_normal(xs).astype(dtype)
        w = rng.standard_normal(ws).astype(dtype)
        y = fallback.conv2d_forward(x, w, stride, pad, groups)
        dy = rng.standard_normal(y.shape).astype(dtype)
        cases = [
            ("forward", lambda impl: impl.conv2d_forward(x, w, stride, pad, groups)),
            ("dgrad", lambda impl: impl.conv2d_input_grad(dy, w, xs[2], xs[3], stride, pad, groups)),
            ("wgrad", lambda impl: impl.conv2d_weight_grad(x, dy, ws[2], ws[3], stride, pad, groups)),
        ]
        for direction, make in cases:
            t_np = bench(lambda: make(fallback))
            if _ckernels is not None:
                t_cy = bench(lambda: make(_ckernels))
                ratio = t_cy / t_np
                print(f"{label:28s} {direction:8s} {t_np:9.3f} {t_cy:10.3f} {ratio:5.1f}x")
            else:
                print(f"{label:28s} {direction:8s} {t_np:9.3f} {'n/a':>10s}")
            label = ""


if __name__ == "__main__":
    run(np.float32)
    run(np.float64)
