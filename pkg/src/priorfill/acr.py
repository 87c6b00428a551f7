"""Restoration generator (encoder, Fourier-convolution stack, decoder),
attention aggregation over token cells, and the patch discriminator.

The generator takes the masked image with its mask as an extra channel. Two
aggregation sites sit after the first and before the last spectral block; each
adds a residual scaled by a zero-initialized scalar, so aggregation starts
inert. Attention can come from the frozen autoencoder (precomputed scores) or
from cosine similarities of the current features (the trainable baseline).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .mae import MaePriors
from .masks import TokenMask
from .module import BatchNorm2d, Conv2d, Deconv2d, Module, ModuleList
from .numerics import Tensor, fft2d, ifft2d, ops
from .numerics.fft import ComplexGrid
from .numerics.tensor import default_dtype


@dataclass
class AcrConfig:
    in_channels: int = 4  # masked RGB + mask channel
    out_channels: int = 3
    stage_widths: tuple = (32, 64, 128, 128)  # at h, h/2, h/4, h/8
    n_ffc: int = 3
    global_ratio: float = 0.5
    aggregation: str = "prior_attention"  # none | prior_attention | contextual

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        if len(self.stage_widths) != 4:
            raise ConfigError("stage_widths must list 4 encoder widths (h .. h/8)")
        if self.aggregation not in ("none", "prior_attention", "contextual"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.global_ratio > 0 and round(self.global_ratio * self.stage_widths[3]) < 1:
            raise ConfigError("global branch would have no channels")
        if self.aggregation != "none" and self.n_ffc < 2:
            raise ConfigError("aggregation sites need at least 2 spectral blocks")


class SpectralTransform(Module):
    """FFT -> 1x1 conv on stacked real/imag channels -> BN -> ReLU -> inverse FFT."""

    def __init__(self, rng, ch: int):
        super().__init__()
        self.conv = self.child("conv", Conv2d(rng, 2 * ch, 2 * ch, 1))
        self.bn = self.child("bn", BatchNorm2d(2 * ch))
        self.ch = ch

    def __call__(self, x: Tensor) -> Tensor:
        grid = fft2d(x)
        z = ops.concat([grid.real, grid.imag], axis=1)
        z = ops.relu(self.bn(self.conv(z)))
        return ifft2d(ComplexGrid(real=z[:, : self.ch], imag=z[:, self.ch :]))


class FfcBlock(Module):
    """Residual block with a local conv branch and a spectral global branch."""

    def __init__(self, rng, ch: int, global_ratio: float):
        super().__init__()
        self.cg = int(round(global_ratio * ch))
        self.cl = ch - self.cg
        self.conv_ll = self.child("conv_ll", Conv2d(rng, self.cl, self.cl, 3, pad=1))
        self.bn_l = self.child("bn_l", BatchNorm2d(self.cl))
        if self.cg:
            self.conv_lg = self.child("conv_lg", Conv2d(rng, self.cl, self.cg, 3, pad=1))
            self.conv_gl = self.child("conv_gl", Conv2d(rng, self.cg, self.cl, 3, pad=1))
            self.spectral = self.child("spectral", SpectralTransform(rng, self.cg))
            self.bn_g = self.child("bn_g", BatchNorm2d(self.cg))

    def __call__(self, x: Tensor) -> Tensor:
        xl = x[:, : self.cl]
        if self.cg == 0:
            return ops.add(x, ops.relu(self.bn_l(self.conv_ll(xl))))
        xg = x[:, self.cl :]
        yl = ops.add(self.conv_ll(xl), self.conv_gl(xg))
        yg = ops.add(self.conv_lg(xl), self.spectral(xg))
        out_l = ops.relu(self.bn_l(yl))
        out_g = ops.relu(self.bn_g(yg))
        return ops.add(x, ops.concat([out_l, out_g], axis=1))


def ffc_forward(block: FfcBlock, feats: Tensor) -> Tensor:
    return block(feats)


# ---------------------------------------------------------------------------
# token-cell attention aggregation


def _feats_to_cells(feats: Tensor, gh: int, gw: int):
    """[B, c, fh, fw] -> (cells [B, T, c*s*s], s) with s = fh/gh cells per token side."""
    b, c, fh, fw = feats.shape
    if fh % gh or fw % gw:
        raise ShapeError(f"feature grid ({fh}, {fw}) not divisible by token grid ({gh}, {gw})")
    s, sw = fh // gh, fw // gw
    if s != sw:
        raise ShapeError("anisotropic token cells are not supported")
    x = ops.reshape(feats, (b, c, gh, s, gw, s))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))  # [B, gh, gw, c, s, s]
    return ops.reshape(x, (b, gh * gw, c * s * s)), s


def _cells_to_feats(cells: Tensor, c: int, gh: int, gw: int, s: int) -> Tensor:
    b = cells.shape[0]
    x = ops.reshape(cells, (b, gh, gw, c, s, s))
    x = ops.transpose(x, (0, 3, 1, 4, 2, 5))  # [B, c, gh, s, gw, s]
    return ops.reshape(x, (b, c, gh * s, gw * s))


def prior_attention_aggregate(feats: Tensor, attention, tmask: TokenMask, beta: Tensor) -> Tensor:
    """Fill masked token cells with attention-weighted sums of unmasked cells.

    Every masked cell m becomes sum_u attention[m, u] * cell_u over unmasked
    cells u; the result enters as a residual scaled by ``beta``, leaving
    unmasked cells bit-identical.
    """
    b, c = feats.shape[0], feats.shape[1]
    cells, s = _feats_to_cells(feats, tmask.gh, tmask.gw)
    m_idx = tmask.masked_indices()
    u_idx = tmask.require_unmasked().unmasked_indices()
    if m_idx.size == 0:
        return feats
    attn = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    weights = Tensor(np.ascontiguousarray(attn[np.ix_(m_idx, u_idx)]).astype(cells.dtype))
    u_cells = ops.gather_rows(cells, np.broadcast_to(u_idx, (b, u_idx.size)))
    filled = ops.matmul(weights, u_cells)  # [B, M, D]
    zeros = Tensor(np.zeros(tuple(cells.shape), dtype=cells.data.dtype))
    delta_cells = ops.scatter_rows(zeros, np.broadcast_to(m_idx, (b, m_idx.size)), filled)
    delta = _cells_to_feats(delta_cells, c, tmask.gh, tmask.gw, s)
    return ops.add(feats, ops.mul(beta, delta))


def contextual_attention(feats: Tensor, tmask: TokenMask) -> Tensor:
    """Cosine-similarity aggregation map (the trainable baseline).

    Masked cells receive softmax-weighted sums of unmasked cells, with
    similarities taken between L2-normalized cell vectors (eps 1e-8 on the
    norms). Returns a map that is zero at unmasked cells.
    """
    b, c = feats.shape[0], feats.shape[1]
    cells, s = _feats_to_cells(feats, tmask.gh, tmask.gw)
    m_idx = tmask.masked_indices()
    u_idx = tmask.require_unmasked().unmasked_indices()
    if m_idx.size == 0:
        return ops.scale(feats, 0.0)
    norms = ops.sqrt(ops.tsum(ops.square(cells), axis=-1, keepdims=True))
    normed = ops.mul(cells, ops.reciprocal(ops.add(norms, Tensor(np.asarray(1e-8, dtype=cells.data.dtype)))))
    n_m = ops.gather_rows(normed, np.broadcast_to(m_idx, (b, m_idx.size)))
    n_u = ops.gather_rows(normed, np.broadcast_to(u_idx, (b, u_idx.size)))
    sim = ops.matmul(n_m, ops.transpose(n_u, (0, 2, 1)))  # [B, M, U]
    weights = ops.softmax_lastdim(sim)
    u_cells = ops.gather_rows(cells, np.broadcast_to(u_idx, (b, u_idx.size)))
    filled = ops.matmul(weights, u_cells)
    zeros = Tensor(np.zeros(tuple(cells.shape), dtype=cells.data.dtype))
    delta_cells = ops.scatter_rows(zeros, np.broadcast_to(m_idx, (b, m_idx.size)), filled)
    return _cells_to_feats(delta_cells, c, tmask.gh, tmask.gw, s)


# ---------------------------------------------------------------------------
# generator


class AcrGenerator(Module):
    def __init__(self, cfg: AcrConfig, rng):
        super().__init__()
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.stage_widths
        self.stem = self.child("stem", Conv2d(rng, cfg.in_channels, w1, 3, pad=1))
        self.stem_bn = self.child("stem_bn", BatchNorm2d(w1))
        self.down1 = self.child("down1", Conv2d(rng, w1, w2, 3, stride=2, pad=1))
        self.down1_bn = self.child("down1_bn", BatchNorm2d(w2))
        self.down2 = self.child("down2", Conv2d(rng, w2, w3, 3, stride=2, pad=1))
        self.down2_bn = self.child("down2_bn", BatchNorm2d(w3))
        self.down3 = self.child("down3", Conv2d(rng, w3, w4, 3, stride=2, pad=1))
        self.down3_bn = self.child("down3_bn", BatchNorm2d(w4))
        self.ffc_blocks = self.child(
            "ffc_blocks", ModuleList([FfcBlock(rng, w4, cfg.global_ratio) for _ in range(cfg.n_ffc)])
        )
        dt = default_dtype()
        self.beta_start = self.param("beta_start", np.zeros((), dtype=dt))
        self.beta_end = self.param("beta_end", np.zeros((), dtype=dt))
        self.up1 = self.child("up1", Deconv2d(rng, w4, w3, 4, stride=2, pad=1))
        self.up1_bn = self.child("up1_bn", BatchNorm2d(w3))
        self.up2 = self.child("up2", Deconv2d(rng, w3, w2, 4, stride=2, pad=1))
        self.up2_bn = self.child("up2_bn", BatchNorm2d(w2))
        self.up3 = self.child("up3", Deconv2d(rng, w2, w1, 4, stride=2, pad=1))
        self.up3_bn = self.child("up3_bn", BatchNorm2d(w1))
        self.head = self.child("head", Conv2d(rng, w1, cfg.out_channels, 3, pad=1))

    def beta_values(self):
        return float(self.beta_start.data), float(self.beta_end.data)


def _as_list(value, n):
    if value is None:
        return [None] * n
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value] * n


def acr_forward(
    model: AcrGenerator,
    img_masked: Tensor,
    mask: Tensor,
    priors: Union[MaePriors, Sequence[MaePriors], None] = None,
    pyramid: Optional[Sequence[Tensor]] = None,
    upsampler=None,
    tmask: Union[TokenMask, Sequence[TokenMask], None] = None,
) -> Tensor:
    """Full generator pass; output in [0, 1].

    ``pyramid`` carries the four injection maps (h/8 .. h) from the upsampler
    branch; ``upsampler`` provides the blend gains. With ``priors`` given and
    the prior_attention mode, masked token cells are refilled from unmasked
    ones after the first and before the last spectral block.
    """
    cfg = model.cfg
    if img_masked.ndim == 3:
        img_masked = ops.reshape(img_masked, (1,) + tuple(img_masked.shape))
    if mask.ndim == 3:
        mask = ops.reshape(mask, (1,) + tuple(mask.shape))
    b = img_masked.shape[0]
    x = ops.concat([img_masked, mask], axis=1)
    f_h = ops.relu(model.stem_bn(model.stem(x)))
    if pyramid is not None:
        from .upsampler import inject

        alphas = upsampler.alphas
        f_h = inject(f_h, pyramid[3], alphas[3])
    f_h2 = ops.relu(model.down1_bn(model.down1(f_h)))
    if pyramid is not None:
        f_h2 = inject(f_h2, pyramid[2], alphas[2])
    f_h4 = ops.relu(model.down2_bn(model.down2(f_h2)))
    if pyramid is not None:
        f_h4 = inject(f_h4, pyramid[1], alphas[1])
    f = ops.relu(model.down3_bn(model.down3(f_h4)))
    if pyramid is not None:
        f = inject(f, pyramid[0], alphas[0])

    def aggregate(feats: Tensor, beta: Tensor) -> Tensor:
        if cfg.aggregation == "none":
            return feats
        tmasks = tmask if isinstance(tmask, (list, tuple)) else [tmask] * b
        priors_list = priors if isinstance(priors, (list, tuple)) else [priors] * b
        if cfg.aggregation == "prior_attention":
            if priors_list[0] is None:
                return feats
            rows = []
            for i in range(b):
                sliced = feats[i : i + 1]
                rows.append(
                    prior_attention_aggregate(sliced, priors_list[i].attention, tmasks[i], beta)
                )
            return ops.concat(rows, axis=0) if b > 1 else rows[0]
        # contextual
        if tmasks[0] is None:
            return feats
        rows = []
        for i in range(b):
            sliced = feats[i : i + 1]
            delta = contextual_attention(sliced, tmasks[i])
            rows.append(ops.add(sliced, ops.mul(beta, delta)))
        return ops.concat(rows, axis=0) if b > 1 else rows[0]

    for i, blk in enumerate(model.ffc_blocks):
        f = blk(f)
        if i == 0 and len(model.ffc_blocks) > 1:
            f = aggregate(f, model.beta_start)
        if i == len(model.ffc_blocks) - 2 and len(model.ffc_blocks) > 1:
            f = aggregate(f, model.beta_end)

    d_h4 = ops.relu(model.up1_bn(model.up1(f)))
    d_h2 = ops.relu(model.up2_bn(model.up2(d_h4)))
    d_h = ops.relu(model.up3_bn(model.up3(d_h2)))
    out = ops.tanh(model.head(d_h))
    return ops.scale(ops.add(out, Tensor(np.asarray(1.0, dtype=out.data.dtype))), 0.5)


# ---------------------------------------------------------------------------
# discriminator


class PatchDiscriminator(Module):
    """Four stride-2 conv + leaky-ReLU stages and a patch score head.

    The score map is input/16 on each side; the four post-activation feature
    maps are exposed for feature matching.
    """

    def __init__(self, rng, in_channels: int = 3, widths=(32, 64, 128, 128)):
        super().__init__()
        chans = [in_channels, *widths]
        self.stages = self.child(
            "stages",
            ModuleList([Conv2d(rng, chans[i], chans[i + 1], 4, stride=2, pad=1) for i in range(4)]),
        )
        self.score = self.child("score", Conv2d(rng, widths[-1], 1, 3, pad=1))


def discriminate(model: PatchDiscriminator, img: Tensor):
    """Returns (raw score map [B, 1, H/16, W/16], list of 4 stage features)."""
    x = img if img.ndim == 4 else ops.reshape(img, (1,) + tuple(img.shape))
    feats = []
    for stage in model.stages:
        x = ops.leaky_relu(stage(x), 0.2)
        feats.append(x)
    return model.score(x), feats
