"""Synthetic saliency data: coloured blobs on a textured background."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .codec import encode_image
from .data import SaliencySample


def make_sample(hw: tuple[int, int], seed, index: int = 0, max_blobs: int = 3) -> SaliencySample:
    """One image with 1..max_blobs blobs; ground truth is a Gaussian bump per blob."""
    h, w = hw
    rng = np.random.default_rng([int(seed), int(index)])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = rng.uniform(0.25, 0.55, size=(3, 1, 1))
    texture = ndimage.gaussian_filter(rng.normal(size=(3, h, w)), sigma=(0, 3, 3), mode="wrap")
    texture /= np.abs(texture).max() + 1e-12
    image = base + 0.12 * texture + 0.03 * rng.normal(size=(3, h, w))

    n_blobs = int(rng.integers(1, max_blobs + 1))
    short = min(h, w)
    sal = np.zeros((h, w))
    fix = np.zeros((h, w), dtype=np.float32)
    for _ in range(n_blobs):
        r = rng.uniform(0.08, 0.14) * short
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        color = rng.uniform(0.0, 1.0, size=3)
        color[rng.integers(3)] = rng.choice([0.05, 0.95])
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        alpha = 1.0 / (1.0 + np.exp((np.sqrt(d2) - r) / 1.5))
        image = image * (1 - alpha) + color.reshape(3, 1, 1) * alpha
        sal += np.exp(-d2 / (2 * (0.9 * r) ** 2))
        fix[int(round(cy)), int(round(cx))] = 1.0
    sal = (sal - sal.min()) / (sal.max() - sal.min())
    return SaliencySample(
        np.clip(image, 0.0, 1.0).astype(np.float32),
        sal[None].astype(np.float32),
        fix[None],
        f"synth_{index:05d}",
    )


def generate(n: int, hw: tuple[int, int], seed: int = 0, offset: int = 0) -> list[SaliencySample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [make_sample(hw, seed, offset + i) for i in range(n)]


def write_split(root, split: str, samples) -> None:
    root = Path(root)
    for sub in ("images", "maps", "fixations"):
        (root / sub / split).mkdir(parents=True, exist_ok=True)
    for s in samples:
        encode_image(root / "images" / split / f"{s.id}.ppm", s.image)
        encode_image(root / "maps" / split / f"{s.id}.pgm", s.saliency)
        if s.fixation is not None:
            encode_image(root / "fixations" / split / f"{s.id}.pgm", s.fixation)


def synthesize(root, n: int, hw: tuple[int, int], seed: int = 0, n_val: int | None = None) -> None:
    """Write ``n`` training and ``n_val`` (default n) validation triplets under ``root``."""
    n_val = n if n_val is None else n_val
    write_split(root, "train", generate(n, hw, seed))
    if n_val:
        write_split(root, "val", generate(n_val, hw, seed, offset=n))
