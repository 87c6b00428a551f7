"""Mask families for pretraining and restoration training.

Pixel masks (``MaskMap``) come from random brush strokes and random convex
polygons; token masks (``TokenMask``) live on the patch grid. All generators
are pure functions of (rng state, parameters): the same seed reproduces the
same bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ContractError, ShapeError

RngLike = Union[int, np.random.Generator]


def as_rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass
class MaskMap:
    """Pixel-level binary mask; 1 marks masked (hole) pixels."""

    h: int
    w: int
    bits: np.ndarray
    family: Optional[str] = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.h, self.w):
            raise ShapeError(f"mask bits {self.bits.shape} != ({self.h}, {self.w})")

    def ratio(self) -> float:
        return float(self.bits.sum()) / (self.h * self.w)


@dataclass
class TokenMask:
    """Patch-grid binary mask; 1 marks masked tokens."""

    gh: int
    gw: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.gh, self.gw):
            raise ShapeError(f"token bits {self.bits.shape} != ({self.gh}, {self.gw})")

    @property
    def tokens(self) -> int:
        return self.gh * self.gw

    def count(self) -> int:
        return int(self.bits.sum())

    def ratio(self) -> float:
        return self.count() / self.tokens

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1)

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat())

    def unmasked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat() == 0)

    def require_unmasked(self) -> "TokenMask":
        if self.count() == self.tokens:
            raise ContractError("token mask has no unmasked token")
        return self

    def upsample(self, patch: int) -> MaskMap:
        """Expand each token bit to a patch x patch pixel block."""
        bits = np.repeat(np.repeat(self.bits, patch, axis=0), patch, axis=1)
        return MaskMap(self.gh * patch, self.gw * patch, bits)


# ---------------------------------------------------------------------------
# pixel-mask generators


def _segment_stamp(bits: np.ndarray, yy, xx, p0, p1, radius: float) -> None:
    """Mark pixels within `radius` of the segment p0-p1 (capsule shape)."""
    y0, x0 = p0
    y1, x1 = p1
    h, w = bits.shape
    ylo = max(int(np.floor(min(y0, y1) - radius)), 0)
    yhi = min(int(np.ceil(max(y0, y1) + radius)) + 1, h)
    xlo = max(int(np.floor(min(x0, x1) - radius)), 0)
    xhi = min(int(np.ceil(max(x0, x1) + radius)) + 1, w)
    if ylo >= yhi or xlo >= xhi:
        return
    yb = yy[ylo:yhi, xlo:xhi]
    xb = xx[ylo:yhi, xlo:xhi]
    dy, dx = y1 - y0, x1 - x0
    seg2 = dy * dy + dx * dx
    if seg2 == 0.0:
        t = np.zeros_like(yb)
    else:
        t = np.clip(((yb - y0) * dy + (xb - x0) * dx) / seg2, 0.0, 1.0)
    py = y0 + t * dy
    px = x0 + t * dx
    inside = (yb - py) ** 2 + (xb - px) ** 2 <= radius * radius
    np.bitwise_or(bits[ylo:yhi, xlo:xhi], inside.astype(np.uint8), out=bits[ylo:yhi, xlo:xhi])


def gen_irregular(rng: RngLike, h: int, w: int, target_ratio: float) -> MaskMap:
    """Union of random-walk brush strokes until the target area is reached.

    Strokes have 4..12 vertices, turning angles uniform in +-pi/2 and widths
    uniform in [h/16, h/8]. Drawing stops as soon as the ratio crosses the
    target (checked per segment), so the achieved ratio stays within a few
    points of the request; the stroke count is capped at 64.
    """
    if not 0.10 <= target_ratio <= 0.50:
        raise ContractError(f"target_ratio {target_ratio} outside [0.10, 0.50]")
    rng = as_rng(rng)
    bits = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    area = h * w
    for _ in range(64):
        if bits.sum() >= target_ratio * area:
            break
        y = rng.uniform(0, h)
        x = rng.uniform(0, w)
        n_vertices = int(rng.integers(4, 13))
        angle = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(h / 16, h / 8)
        radius = max(width / 2.0, 0.5)
        for _ in range(n_vertices):
            angle += rng.uniform(-np.pi / 2, np.pi / 2)
            length = rng.uniform(h / 16, h / 8)
            ny = min(max(y + length * np.sin(angle), 0.0), h - 1.0)
            nx = min(max(x + length * np.cos(angle), 0.0), w - 1.0)
            _segment_stamp(bits, yy, xx, (y, x), (ny, nx), radius)
            y, x = ny, nx
            if bits.sum() >= target_ratio * area:
                break
    return MaskMap(h, w, bits, family="irregular")


def _convex_polygon_fill(bits: np.ndarray, yy, xx, verts: np.ndarray) -> None:
    """Fill a convex polygon given counterclockwise vertices [(y, x), ...]."""
    h, w = bits.shape
    ylo = max(int(np.floor(verts[:, 0].min())), 0)
    yhi = min(int(np.ceil(verts[:, 0].max())) + 1, h)
    xlo = max(int(np.floor(verts[:, 1].min())), 0)
    xhi = min(int(np.ceil(verts[:, 1].max())) + 1, w)
    if ylo >= yhi or xlo >= xhi:
        return
    yb = yy[ylo:yhi, xlo:xhi]
    xb = xx[ylo:yhi, xlo:xhi]
    inside = np.ones(yb.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        y0, x0 = verts[i]
        y1, x1 = verts[(i + 1) % n]
        inside &= (x1 - x0) * (yb - y0) - (y1 - y0) * (xb - x0) >= 0
    np.bitwise_or(bits[ylo:yhi, xlo:xhi], inside.astype(np.uint8), out=bits[ylo:yhi, xlo:xhi])


def gen_polygon(rng: RngLike, h: int, w: int, target_ratio: float) -> MaskMap:
    """Union of filled random convex polygons (5..12 vertices) until the target."""
    if not 0.10 <= target_ratio <= 0.50:
        raise ContractError(f"target_ratio {target_ratio} outside [0.10, 0.50]")
    rng = as_rng(rng)
    bits = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    area = h * w
    for _ in range(64):
        if bits.sum() >= target_ratio * area:
            break
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        n_vertices = int(rng.integers(5, 13))
        r = rng.uniform(h / 12, h / 8)
        aspect = rng.uniform(0.6, 1.4)
        rot = rng.uniform(0, 2 * np.pi)
        # sorted angles around the center keep the polygon convex
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
        ey = np.sin(angles) * r
        ex = np.cos(angles) * r * aspect
        vy = cy + ey * np.cos(rot) - ex * np.sin(rot)
        vx = cx + ey * np.sin(rot) + ex * np.cos(rot)
        _convex_polygon_fill(bits, yy, xx, np.stack([vy, vx], axis=1))
    return MaskMap(h, w, bits, family="polygon")


def gen_acr_training_mask(rng: RngLike, h: int, w: int) -> MaskMap:
    """Training mask mix: 80% a single family, 20% the union of both families."""
    rng = as_rng(rng)
    combined = rng.random() < 0.2
    target = rng.uniform(0.10, 0.50)
    if not combined:
        gen = gen_irregular if rng.random() < 0.5 else gen_polygon
        return gen(rng, h, w, target)
    half = max(target / 2.0, 0.10)
    m1 = gen_irregular(rng, h, w, half)
    m2 = gen_polygon(rng, h, w, half)
    bits = np.bitwise_or(m1.bits, m2.bits)
    out = MaskMap(h, w, bits, family="combined")
    if out.ratio() < 0.10:
        extra = gen_irregular(rng, h, w, 0.10)
        out.bits = np.bitwise_or(out.bits, extra.bits)
    return out


def square_mask(h: int, w: int, ratio: float) -> MaskMap:
    """Centered square hole covering roughly `ratio` of the pixels."""
    side = int(round(np.sqrt(ratio * h * w)))
    side = max(1, min(side, min(h, w)))
    bits = np.zeros((h, w), dtype=np.uint8)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    bits[y0 : y0 + side, x0 : x0 + side] = 1
    return MaskMap(h, w, bits, family="square")


# ---------------------------------------------------------------------------
# token-mask operations


def downsample_to_tokens(m: MaskMap, patch: int) -> TokenMask:
    """Max-pool a pixel mask onto the patch grid: any masked pixel masks its token."""
    if m.h % patch or m.w % patch:
        raise ShapeError(f"extents ({m.h}, {m.w}) not divisible by patch {patch}")
    gh, gw = m.h // patch, m.w // patch
    bits = m.bits.reshape(gh, patch, gw, patch).max(axis=(1, 3))
    return TokenMask(gh, gw, bits)


def gen_random_token_mask(rng: RngLike, gh: int, gw: int, ratio: float = 0.75) -> TokenMask:
    """Uniform sample without replacement of exactly round(ratio * tokens)."""
    rng = as_rng(rng)
    total = gh * gw
    count = int(round(ratio * total))
    bits = np.zeros(total, dtype=np.uint8)
    bits[rng.choice(total, size=count, replace=False)] = 1
    return TokenMask(gh, gw, bits.reshape(gh, gw))


def _trim_border_tokens(rng: np.random.Generator, bits: np.ndarray, count: int) -> None:
    """Unset random masked tokens that touch an unmasked 4-neighbor until `count` remain."""
    while bits.sum() > count:
        padded = np.pad(bits, 1, constant_values=0)
        neighbor_min = np.minimum(
            np.minimum(padded[:-2, 1:-1], padded[2:, 1:-1]),
            np.minimum(padded[1:-1, :-2], padded[1:-1, 2:]),
        )
        border = np.flatnonzero((bits == 1).reshape(-1) & (neighbor_min == 0).reshape(-1))
        if border.size == 0:  # solid block spanning the grid: fall back to any masked token
            border = np.flatnonzero(bits.reshape(-1) == 1)
        drop = rng.choice(border, size=min(border.size, int(bits.sum()) - count), replace=False)
        bits.reshape(-1)[drop] = 0


def gen_mae_pretrain_mask(rng: RngLike, gh: int, gw: int, continuous_ratio: float) -> TokenMask:
    """Blend of one continuous mask and random tokens, exactly 75% masked.

    A continuous pixel mask (brush or polygon family, even odds) at
    `continuous_ratio` is enlarged to the token grid; random tokens are then
    added, or border tokens of the continuous region trimmed, until exactly
    round(0.75 * tokens) are masked.
    """
    if gh * gw < 4:
        raise ContractError("token grid too small")
    if not 0.10 <= continuous_ratio <= 0.50:
        raise ContractError(f"continuous_ratio {continuous_ratio} outside [0.10, 0.50]")
    rng = as_rng(rng)
    scale = 4  # synthetic pixel resolution per token for drawing the continuous shape
    gen = gen_irregular if rng.random() < 0.5 else gen_polygon
    pixel = gen(rng, gh * scale, gw * scale, continuous_ratio)
    token = downsample_to_tokens(pixel, scale)
    bits = token.bits.copy()
    count = int(round(0.75 * gh * gw))
    cur = int(bits.sum())
    if cur < count:
        free = np.flatnonzero(bits.reshape(-1) == 0)
        add = rng.choice(free, size=count - cur, replace=False)
        bits.reshape(-1)[add] = 1
    elif cur > count:
        _trim_border_tokens(rng, bits, count)
    return TokenMask(gh, gw, bits)
