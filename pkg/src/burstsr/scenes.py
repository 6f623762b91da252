"""Procedural sRGB test scenes: gradients, shapes, gratings and hard edges.

They stand in for a photo collection when generating synthetic bursts and
have enough high-frequency content for super-resolution to matter.
"""

from __future__ import annotations

import numpy as np


def procedural_scene(rng: np.random.Generator, size: int | tuple[int, int] = 128) -> np.ndarray:
    """Random (H, W, 3) float64 image in [0, 1]."""
    H, W = (size, size) if isinstance(size, int) else size
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")

    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]

    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 1, 3)
        kind = rng.integers(3)
        if kind == 0:
            cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        elif kind == 1:
            y0, x0 = rng.uniform(0, 0.8, 2)
            h, w = rng.uniform(0.1, 0.5, 2)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            a = rng.uniform(0, np.pi)
            d = np.cos(a) * (xx - 0.5) + np.sin(a) * (yy - 0.5)
            mask = d > rng.uniform(-0.3, 0.3)
        img[mask] = color

    # grating patch: periodic detail near the sampling limit of the LR grid
    freq = rng.uniform(6, 24)
    a = rng.uniform(0, np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(a) * xx + np.sin(a) * yy))
    y0, x0 = rng.uniform(0, 0.6, 2)
    patch = (yy >= y0) & (yy < y0 + 0.4) & (xx >= x0) & (xx < x0 + 0.4)
    tint = rng.uniform(0.2, 1.0, 3)
    img[patch] = (wave[patch, None] * tint)

    return np.clip(img, 0.0, 1.0)
