"""Training objective: masked L1, adversarial pair with gradient penalty,
feature matching, and a frozen multi-scale perceptual term.

The perceptual extractor is a fixed-seed dilated conv pyramid standing in for
a pretrained segmentation backbone: the structural role (multi-scale feature
MSE with a wide receptive field) is kept while staying self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .acr import PatchDiscriminator, discriminate
from .masks import MaskMap
from .module import Module
from .numerics import Tensor, grad_of, no_grad, ops
from .numerics.conv import conv2d, dilate_weight
from .numerics.tensor import default_dtype

LOG_CLAMP = 1e-7


@dataclass
class LossWeights:
    l1: float = 10.0
    adv: float = 10.0
    fm: float = 100.0
    hrf: float = 30.0
    gp: float = 1e-3

    def __post_init__(self):
        if min(self.l1, self.adv, self.fm, self.hrf, self.gp) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class HrfExtractor(Module):
    """Frozen three-stage dilated conv pyramid (substitute perceptual net).

    Weights are drawn once from the seed and never trained; gradients still
    flow through the convolutions into the compared images.
    """

    STAGES = ((16, 1, 1), (32, 2, 2), (64, 4, 2))  # (channels, dilation, stride)

    def __init__(self, seed: int, in_channels: int = 3):
        super().__init__()
        rng = np.random.default_rng(seed)
        dt = default_dtype()
        self.seed = seed
        self.weights = []
        self.pads = []
        self.strides = []
        ch = in_channels
        for i, (out_ch, dil, stride) in enumerate(self.STAGES):
            fan_in = ch * 9
            w = (rng.standard_normal((out_ch, ch, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dt)
            w = dilate_weight(w, dil)
            wt = self.buffer(f"w{i}", w)
            self.weights.append(wt)
            self.pads.append(dil)
            self.strides.append(stride)
            ch = out_ch

    def __call__(self, img: Tensor) -> list[Tensor]:
        x = img if img.ndim == 4 else ops.reshape(img, (1,) + tuple(img.shape))
        feats = []
        for w, pad, stride in zip(self.weights, self.pads, self.strides):
            x = ops.relu(conv2d(x, w, stride=stride, pad=pad))
            feats.append(x)
        return feats


def _clamped_log(x: Tensor) -> Tensor:
    return ops.log(ops.clamp(x, min_v=LOG_CLAMP))


def _mask_bits(mask) -> np.ndarray:
    """Accept a MaskMap or a raw bit array ([H, W] or [B, 1, H, W])."""
    return mask.bits if isinstance(mask, MaskMap) else np.asarray(mask)


def _pool_mask(bits: np.ndarray, sh: int, sw: int) -> np.ndarray:
    """Max-pool mask bits onto the discriminator score grid."""
    h, w = bits.shape[-2:]
    fh, fw = h // sh, w // sw
    if fh * sh != h or fw * sw != w:
        raise ValueError(f"mask {h}x{w} does not pool onto score grid {sh}x{sw}")
    view = bits.reshape(bits.shape[:-2] + (sh, fh, sw, fw))
    return view.max(axis=(-3, -1))


def l1_unmasked(pred: Tensor, gt: Tensor, mask) -> Tensor:
    """Mean over all elements of (1 - M) |pred - gt|; holes contribute zero."""
    keep = Tensor((1.0 - _mask_bits(mask)).astype(pred.dtype))
    return ops.tmean(ops.mul(ops.absolute(ops.sub(pred, gt)), keep))


def disc_loss(disc: PatchDiscriminator, real: Tensor, fake: Tensor, mask) -> Tensor:
    """PatchGAN log loss with mask-weighted fake terms.

    Fake patches outside the hole are scored as real; hole patches as fake.
    ``fake`` must already be detached from the generator graph.
    """
    score_real, _ = discriminate(disc, real)
    score_fake, _ = discriminate(disc, fake)
    sr = ops.sigmoid(score_real)
    sf = ops.sigmoid(score_fake)
    m = _pool_mask(_mask_bits(mask), score_fake.shape[-2], score_fake.shape[-1])
    m_t = Tensor(m.astype(sf.dtype))
    keep_t = Tensor((1.0 - m).astype(sf.dtype))
    term_real = ops.tmean(_clamped_log(sr))
    term_fake_keep = ops.tmean(ops.mul(_clamped_log(sf), keep_t))
    term_fake_hole = ops.tmean(
        ops.mul(_clamped_log(ops.sub(Tensor(np.asarray(1.0, dtype=sf.data.dtype)), sf)), m_t)
    )
    return ops.neg(ops.add(ops.add(term_real, term_fake_keep), term_fake_hole))


def gen_adv_loss(disc: PatchDiscriminator, fake: Tensor) -> Tensor:
    """Nonsaturating generator term: -E[log sigmoid(D(fake))]."""
    score, _ = discriminate(disc, fake)
    return ops.neg(ops.tmean(_clamped_log(ops.sigmoid(score))))


def gradient_penalty(disc: PatchDiscriminator, real: Tensor) -> Tensor:
    """Mean squared input-gradient norm of the raw patch scores on real samples."""
    x = Tensor(real.data, requires_grad=True)
    score, _ = discriminate(disc, x)
    total = ops.tsum(score)
    (g,) = grad_of(total, [x], create_graph=True)
    batch = x.shape[0] if x.ndim == 4 else 1
    return ops.scale(ops.tsum(ops.square(g)), 1.0 / batch)


def feature_match(disc: PatchDiscriminator, real: Tensor, fake: Tensor) -> Tensor:
    """Mean stage-wise L1 between discriminator features of real and fake."""
    with no_grad():
        _, feats_real = discriminate(disc, real)
    _, feats_fake = discriminate(disc, fake)
    total = None
    for fr, ff in zip(feats_real, feats_fake):
        term = ops.tmean(ops.absolute(ops.sub(ff, Tensor(fr.data))))
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / len(feats_real))


def hrf_loss(extractor: HrfExtractor, real: Tensor, fake: Tensor) -> Tensor:
    """Feature-pyramid MSE summed over stages."""
    with no_grad():
        feats_real = extractor(real)
    feats_fake = extractor(fake)
    total = None
    for fr, ff in zip(feats_real, feats_fake):
        term = ops.tmean(ops.square(ops.sub(ff, Tensor(fr.data))))
        total = term if total is None else ops.add(total, term)
    return total


def total_generator_loss(components: dict, weights: LossWeights) -> Tensor:
    """weights.l1 * L1 + weights.adv * adv + weights.fm * fm + weights.hrf * hrf.

    The discriminator side (disc loss + weights.gp * penalty) is optimized
    separately.
    """
    return ops.add(
        ops.add(ops.scale(components["l1"], weights.l1), ops.scale(components["adv"], weights.adv)),
        ops.add(ops.scale(components["fm"], weights.fm), ops.scale(components["hrf"], weights.hrf)),
    )
