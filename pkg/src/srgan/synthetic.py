"""Deterministic synthetic HR images for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .image_pipeline import ImageU8, save_image


def synthetic_image(rng: np.random.Generator, size: int = 64) -> ImageU8:
    """Black-and-white scene of overlapping discs and boxes (XOR-combined).

    Hard two-level edges are where interpolation loses the most, and a
    binary prior is something a small network can pick up in a few hundred
    steps, which makes these images a quick check that training learns
    more than interpolation.
    """
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(5, 10))):
        cy, cx = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            mask ^= (yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(4, size / 4) ** 2
        else:
            hy, hx = rng.uniform(3, size / 4, 2)
            mask ^= (abs(yy - cy) < hy) & (abs(xx - cx) < hx)
    if rng.random() < 0.5:
        mask = ~mask
    return ImageU8(np.repeat(mask[:, :, None] * np.uint8(255), 3, axis=2))


def write_toy_dataset(out_dir, count: int = 8, size: int = 64, seed: int = 0) -> Path:
    """Write ``count`` PNGs plus a ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(count):
        name = f"toy_{i:03d}.png"
        save_image(synthetic_image(rng, size), out_dir / name)
        names.append(name)
    manifest = out_dir / "manifest.txt"
    manifest.write_text("# synthetic training images\n" + "\n".join(names) + "\n")
    return manifest
