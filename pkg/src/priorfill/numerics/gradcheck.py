"""Finite-difference gradient verification.

Central differences with h=1e-4 in float64; per-element relative error is
|analytic - numeric| / max(|analytic|, |numeric|), skipping elements where
both magnitudes are below 1e-8 (float noise there swamps the ratio).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference d(fn)/d(leaf), perturbing one element at a time."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    keep = scale >= floor
    if not keep.any():
        return 0.0
    return float((np.abs(analytic - numeric)[keep] / scale[keep]).max())


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between backprop and finite differences.

    ``fn(*inputs)`` must return a scalar tensor; every input with
    requires_grad set is checked. Inputs should be float64.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.data if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: fn(*inputs), t, h=h)
        worst = max(worst, max_rel_error(analytic, numeric, floor=floor))
    return worst
