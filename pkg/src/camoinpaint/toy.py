"""Synthetic camouflage pairs: a blob object wearing the same texture as its background."""
from __future__ import annotations

import numpy as np

from .data import CamoPair, write_dataset


def _texture(rng, size, colors, theta, freq, phase, spot_scale):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    u = np.cos(theta) * xx + np.sin(theta) * yy
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
    # low-frequency mottling keeps stripes from being perfectly periodic
    k = rng.normal(size=(4, 2)) * spot_scale
    p = rng.uniform(0, 2 * np.pi, size=4)
    mottle = sum(np.sin(2 * np.pi * (k[i, 0] * xx + k[i, 1] * yy) + p[i]) for i in range(4)) / 8 + 0.5
    w = np.clip(0.7 * stripes + 0.3 * mottle, 0, 1)[..., None]
    img = colors[0] * (1 - w) + colors[1] * w
    return img + rng.normal(scale=0.02, size=img.shape)


def _blob_mask(rng, size, area_range=(0.12, 0.3)):
    area = rng.uniform(*area_range) * size * size
    r0 = np.sqrt(area / np.pi)
    margin = r0 * 1.3
    cy, cx = rng.uniform(margin, size - margin, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    r = np.ones_like(ang)
    for k in (2, 3, 4):
        r += rng.uniform(0, 0.25 / k * 2) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    inside = rad <= r0 * r
    return np.where(inside, 0, 1).astype(np.uint8)


def make_pair(rng: np.random.Generator, size: int = 64, id: str = "toy") -> CamoPair:
    """One camouflage pair. Object and background share palette, orientation and frequency."""
    colors = rng.uniform(0.05, 0.95, size=(2, 3)).astype(np.float32)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(2, 7)
    spot = rng.uniform(0.5, 2.0)
    bg = _texture(rng, size, colors, theta, freq, rng.uniform(0, 2 * np.pi), spot)
    fg_colors = np.clip(colors + rng.normal(scale=0.04, size=colors.shape), 0, 1)
    fg = _texture(rng, size, fg_colors, theta + rng.normal(scale=0.3), freq * rng.uniform(0.85, 1.15),
                  rng.uniform(0, 2 * np.pi), spot)
    mask = _blob_mask(rng, size)
    img = np.where(mask[..., None] == 1, bg, fg)
    img = np.round(np.clip(img, 0, 1) * 255) / 255  # exactly representable at 8 bits
    return CamoPair(img.astype(np.float32), mask, id)


def make_pairs(n: int, seed: int = 0, size: int = 64) -> list[CamoPair]:
    rng = np.random.default_rng(seed)
    return [make_pair(rng, size, f"toy{i:05d}") for i in range(n)]


def make_toy_dataset(root, n: int = 2000, test_fraction: float = 0.25, seed: int = 0, size: int = 64):
    """Write ``n`` pairs under ``root`` with a manifest; the last ``test_fraction`` are test."""
    pairs = make_pairs(n, seed, size)
    n_test = int(round(n * test_fraction))
    splits = ["train"] * (n - n_test) + ["test"] * n_test
    return write_dataset(root, pairs, splits)
