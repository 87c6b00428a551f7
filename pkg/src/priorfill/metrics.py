"""Evaluation: PSNR, windowed SSIM, and the attention argmax visualization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .masks import TokenMask
from .numerics import Tensor

PSNR_CAP = 99.0


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB for (near-)identical inputs."""
    a, b = _as_array(a).astype(np.float64), _as_array(b).astype(np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def hole_psnr(pred, gt, mask_bits, peak: float = 1.0) -> float:
    """PSNR restricted to masked pixels (after compositing, the hole content)."""
    pred, gt = _as_array(pred), _as_array(gt)
    bits = _as_array(mask_bits).astype(bool)
    if bits.ndim == pred.ndim - 1:
        bits = np.broadcast_to(bits[None], pred.shape)
    else:
        bits = np.broadcast_to(bits, pred.shape)
    if not bits.any():
        raise ContractError("mask has no hole pixels")
    return psnr(pred[bits], gt[bits], peak=peak)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _windows(img: np.ndarray, size: int) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(img, (size, size))


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean local SSIM over valid Gaussian-weighted windows.

    Multichannel inputs are scored per channel and averaged. Extents must be
    at least the window size.
    """
    a, b = _as_array(a).astype(np.float64), _as_array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], window, k1, k2, peak) for c in range(a.shape[0])]))
    if a.ndim != 2:
        raise ContractError("ssim expects [H, W] or [C, H, W]")
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    w = _gaussian_window(window)
    wa, wb = _windows(a, window), _windows(b, window)
    mu_a = np.einsum("ijkl,kl->ij", wa, w)
    mu_b = np.einsum("ijkl,kl->ij", wb, w)
    aa = np.einsum("ijkl,kl->ij", wa * wa, w) - mu_a**2
    bb = np.einsum("ijkl,kl->ij", wb * wb, w) - mu_b**2
    ab = np.einsum("ijkl,kl->ij", wa * wb, w) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (aa + bb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# attention read-out


def attention_argmax_map(attention, tmask: TokenMask):
    """Strongest attended visible token per masked token.

    Returns (index_map, rgb) where index_map is [gh, gw] holding, for masked
    tokens, the flat index of the most-attended unmasked token (-1 at unmasked
    tokens), and rgb is a [3, gh, gw] palette rendering: unmasked tokens are
    black, masked tokens take the palette color of the position they attend
    to, so equal colors mean "borrows from the same place".
    """
    att = _as_array(attention)
    gh, gw = tmask.gh, tmask.gw
    flat_mask = tmask.flat().astype(bool)
    masked = np.flatnonzero(flat_mask)
    index_map = np.full(gh * gw, -1, dtype=np.int64)
    if masked.size:
        rows = att[masked]
        index_map[masked] = rows.argmax(axis=1)
    palette = _position_palette(gh, gw)
    rgb = np.zeros((3, gh * gw), dtype=np.float32)
    if masked.size:
        rgb[:, masked] = palette[:, index_map[masked]]
    return index_map.reshape(gh, gw), rgb.reshape(3, gh, gw)


def _position_palette(gh: int, gw: int) -> np.ndarray:
    """[3, gh*gw] color per grid position: red tracks x, green tracks y."""
    gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    r = gx / max(gw - 1, 1)
    g = gy / max(gh - 1, 1)
    b = 1.0 - 0.5 * (r + g)
    return np.stack([r, g, b]).reshape(3, -1).astype(np.float32)


def render_attention_map(attention, tmask: TokenMask, scale: int = 8) -> np.ndarray:
    """Upscaled [3, gh*scale, gw*scale] image of the argmax map."""
    _, rgb = attention_argmax_map(attention, tmask)
    return np.repeat(np.repeat(rgb, scale, axis=1), scale, axis=2)


# ---------------------------------------------------------------------------
# evaluation reports


def ratio_bucket(ratio: float) -> str:
    edges = [(0.2, "10-20%"), (0.3, "20-30%"), (0.4, "30-40%"), (0.5, "40-50%")]
    for hi, name in edges:
        if ratio <= hi:
            return name
    return ">50%"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: name, psnr, ssim, mask_ratio, bucket

    def add(self, name: str, psnr_db: float, ssim_val: float, mask_ratio: float) -> None:
        self.rows.append(
            {
                "name": name,
                "psnr": psnr_db,
                "ssim": ssim_val,
                "mask_ratio": mask_ratio,
                "bucket": ratio_bucket(mask_ratio),
            }
        )

    def aggregate(self) -> dict:
        if not self.rows:
            return {"psnr": float("nan"), "ssim": float("nan"), "count": 0}
        return {
            "psnr": float(np.mean([r["psnr"] for r in self.rows])),
            "ssim": float(np.mean([r["ssim"] for r in self.rows])),
            "count": len(self.rows),
        }

    def to_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("name,psnr,ssim,mask_ratio,bucket\n")
            for r in self.rows:
                fh.write(f"{r['name']},{r['psnr']!r},{r['ssim']!r},{r['mask_ratio']!r},{r['bucket']}\n")

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"rows": self.rows, "aggregate": self.aggregate()}, fh, indent=2)
