"""Multi-resolution injection branch feeding autoencoder features into the
restoration encoder.

Extracted token features are resized to one eighth of the working image,
concatenated with a normalized coordinate grid, pushed through a gated
deconvolution pyramid, and blended into the encoder stages through scalar
gains that start at exactly zero, so a fresh branch cannot perturb the host
network until training moves the gains.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .mae import MaePriors
from .module import BatchNorm2d, Conv2d, Deconv2d, Module
from .numerics import Tensor, bilinear_resize, ops
from .numerics.tensor import default_dtype


def cartesian_grid(h: int, w: int) -> Tensor:
    """[2, h, w] coordinate grid: channel 0 is x, channel 1 is y, both in [-1, 1].

    Align-corners spacing: the four corners carry exactly (+-1, +-1).
    """
    dt = default_dtype()
    xs = np.linspace(-1.0, 1.0, w, dtype=dt) if w > 1 else np.zeros(1, dtype=dt)
    ys = np.linspace(-1.0, 1.0, h, dtype=dt) if h > 1 else np.zeros(1, dtype=dt)
    gx = np.broadcast_to(xs[None, :], (h, w))
    gy = np.broadcast_to(ys[:, None], (h, w))
    return Tensor(np.stack([gx, gy]).copy())


def build_fp_prime(priors: MaePriors, h: int, w: int) -> Tensor:
    """Resize [gh, gw, d] prior features to (h/8, w/8) and append the grid.

    Output is [d + 2, h/8, w/8].
    """
    if h % 8 or w % 8:
        raise ShapeError(f"image extents ({h}, {w}) must be divisible by 8")
    th, tw = h // 8, w // 8
    feats = ops.transpose(priors.features, (2, 0, 1))  # [d, gh, gw]
    feats = bilinear_resize(feats, th, tw)
    return ops.concat([feats, cartesian_grid(th, tw)], axis=0)


def build_fp_prime_batch(priors_list, h: int, w: int) -> Tensor:
    """Stack per-image fp' maps into [B, d+2, h/8, w/8]."""
    return ops.stack([build_fp_prime(p, h, w) for p in priors_list], axis=0)


class GatedConvBlock(Module):
    """GateConv -> BatchNorm -> ReLU at stride 1."""

    def __init__(self, rng, in_ch: int, out_ch: int):
        super().__init__()
        self.feat = self.child("feat", Conv2d(rng, in_ch, out_ch, 3, stride=1, pad=1))
        self.gate = self.child("gate", Conv2d(rng, in_ch, out_ch, 3, stride=1, pad=1))
        self.bn = self.child("bn", BatchNorm2d(out_ch))

    def gate_activations(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.gate(x))

    def __call__(self, x: Tensor) -> Tensor:
        gated = ops.mul(self.feat(x), ops.sigmoid(self.gate(x)))
        return ops.relu(self.bn(gated))


class GatedDeconvBlock(Module):
    """GateConv (transposed, stride 2) -> BatchNorm -> ReLU; doubles the extent."""

    def __init__(self, rng, in_ch: int, out_ch: int):
        super().__init__()
        self.feat = self.child("feat", Deconv2d(rng, in_ch, out_ch, 4, stride=2, pad=1))
        self.gate = self.child("gate", Deconv2d(rng, in_ch, out_ch, 4, stride=2, pad=1))
        self.bn = self.child("bn", BatchNorm2d(out_ch))

    def gate_activations(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.gate(x))

    def __call__(self, x: Tensor) -> Tensor:
        gated = ops.mul(self.feat(x), ops.sigmoid(self.gate(x)))
        return ops.relu(self.bn(gated))


class PriorUpsampler(Module):
    """Gated pyramid from (h/8) features up to full resolution, plus the
    zero-initialized per-resolution blend gains alpha1..alpha4 (alpha1 at h/8).
    """

    def __init__(self, rng, in_dim: int, stage_widths):
        super().__init__()
        w1, w2, w3, w4 = stage_widths  # widths at h, h/2, h/4, h/8
        self.block1 = self.child("block1", GatedConvBlock(rng, in_dim, w4))
        self.up2 = self.child("up2", GatedDeconvBlock(rng, w4, w3))
        self.up3 = self.child("up3", GatedDeconvBlock(rng, w3, w2))
        self.up4 = self.child("up4", GatedDeconvBlock(rng, w2, w1))
        dt = default_dtype()
        self.alphas = [self.param(f"alpha{j}", np.zeros((), dtype=dt)) for j in (1, 2, 3, 4)]

    def alpha_values(self) -> list[float]:
        return [float(a.data) for a in self.alphas]

    def __call__(self, fp_prime: Tensor) -> list[Tensor]:
        """fp_prime [B, d+2, h/8, w/8] -> [P1 at h/8, P2 at h/4, P3 at h/2, P4 at h]."""
        p1 = self.block1(fp_prime)
        p2 = self.up2(p1)
        p3 = self.up3(p2)
        p4 = self.up4(p3)
        return [p1, p2, p3, p4]


def inject(acr_feats: Tensor, p: Tensor, alpha: Tensor) -> Tensor:
    """Blend one pyramid level into encoder features: feats + alpha * p."""
    if tuple(acr_feats.shape) != tuple(p.shape):
        raise ShapeError(f"injection shapes differ: {tuple(acr_feats.shape)} vs {tuple(p.shape)}")
    return ops.add(acr_feats, ops.mul(alpha, p))
