"""Image I/O and synthetic toy data.

Images travel as float arrays in [0, 1], channel-first [C, H, W]. Datasets
are directories of PNGs, resized on load.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import ConfigError
from .masks import MaskMap, as_rng


def load_image(path: str, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: str, arr: np.ndarray) -> None:
    """[C, H, W] or [H, W] floats in [0, 1] -> 8-bit PNG."""
    a = np.clip(arr, 0.0, 1.0)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        mode = "RGB"
    else:
        mode = "L"
    Image.fromarray((a * 255.0 + 0.5).astype(np.uint8), mode=mode).save(path)


def load_dataset(directory: str, size: int) -> list[np.ndarray]:
    """All PNG images under a directory, sorted by name, resized to `size`."""
    if not os.path.isdir(directory):
        raise ConfigError(f"dataset directory {directory!r} does not exist")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise ConfigError(f"dataset directory {directory!r} holds no PNG images")
    return [load_image(os.path.join(directory, n), size) for n in names]


def save_mask(path: str, mask: MaskMap) -> None:
    """Mask PNG convention: 0 = keep, 255 = masked."""
    Image.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path: str) -> MaskMap:
    arr = np.asarray(Image.open(path).convert("L"))
    bits = (arr >= 128).astype(np.uint8)
    return MaskMap(bits.shape[0], bits.shape[1], bits)


def synthetic_images(n: int, size: int, seed: int) -> list[np.ndarray]:
    """Smooth random scenes: blended gradients plus soft blobs, in [0, 1]."""
    rng = as_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    images = []
    for _ in range(n):
        img = np.zeros((3, size, size), dtype=np.float32)
        for c in range(3):
            gx, gy = rng.uniform(-1, 1, size=2)
            img[c] = 0.5 + 0.25 * (gx * (xx - 0.5) + gy * (yy - 0.5))
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            radius = rng.uniform(0.1, 0.3)
            color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))).astype(np.float32)
            img += (color[:, None, None] - img) * blob[None] * 0.8
        images.append(np.clip(img, 0.0, 1.0))
    return images


def synthetic_textured_images(n: int, size: int, seed: int) -> list[np.ndarray]:
    """Scenes with periodic structure: smooth base plus oriented gratings.

    Self-similar content makes hole filling benefit from borrowing visible
    patches, which is what the toy restoration experiments exercise.
    """
    rng = as_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    images = []
    for base in synthetic_images(n, size, rng):
        img = base * 0.4 + 0.3
        for _ in range(int(rng.integers(3, 6))):
            angle = rng.uniform(0, np.pi)
            freq = rng.uniform(5, 13)
            fy, fx = freq * np.sin(angle), freq * np.cos(angle)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.08, 0.2)
            color = rng.uniform(0.3, 1.0, size=3).astype(np.float32)
            wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase).astype(np.float32)
            img += amp * color[:, None, None] * wave[None]
        images.append(np.clip(img, 0.0, 1.0))
    return images


def write_synthetic_dataset(directory: str, n: int, size: int, seed: int) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(synthetic_images(n, size, seed)):
        path = os.path.join(directory, f"img_{i:03d}.png")
        save_image(path, img)
        paths.append(path)
    return paths
