"""Procedural 10-class 32x32 shape dataset.

Used as the offline default when no real image archive is available. Each
class is a shape family drawn at a random position, scale, rotation and color
on a smooth random background with pixel noise, so classes are separable by
shape only.
"""

from __future__ import annotations

import numpy as np

CLASS_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "cross",
    "hbars",
    "vbars",
    "twin_disks",
    "diamond",
)


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray, size: float) -> np.ndarray:
    """Boolean mask of shape `cls` in local (rotated, centered) coords."""
    r = np.hypot(u, v)
    if cls == 0:
        return r <= size
    if cls == 1:
        return (np.abs(u) <= 0.85 * size) & (np.abs(v) <= 0.85 * size)
    if cls == 2:
        # upward triangle with base at v = +0.7 size
        return (v <= 0.7 * size) & (v >= -size + 2.0 * np.abs(u) * 0.95)
    if cls == 3:
        return (r <= size) & (r >= 0.55 * size)
    if cls == 4:
        w = 0.3 * size
        return ((np.abs(u) <= w) & (np.abs(v) <= size)) | ((np.abs(v) <= w) & (np.abs(u) <= size))
    if cls == 5:
        w = 0.3 * size
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return ((np.abs(a) <= w) & (np.abs(b) <= size)) | ((np.abs(b) <= w) & (np.abs(a) <= size))
    if cls == 6:
        box = (np.abs(u) <= size) & (np.abs(v) <= size)
        return box & (np.mod(v + size, 0.8 * size) < 0.4 * size)
    if cls == 7:
        box = (np.abs(u) <= size) & (np.abs(v) <= size)
        return box & (np.mod(u + size, 0.8 * size) < 0.4 * size)
    if cls == 8:
        d = 0.55 * size
        return (np.hypot(u - d, v) <= 0.45 * size) | (np.hypot(u + d, v) <= 0.45 * size)
    if cls == 9:
        return (np.abs(u) + np.abs(v)) <= size
    raise ValueError(f"unknown synthetic class {cls}")


def render(cls: int, rng: np.random.Generator, side: int = 32) -> np.ndarray:
    """Draw one HxWx3 float32 image of class `cls` in [0, 1]."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float32)
    c = side / 2.0

    # smooth background: random linear gradient per channel
    g0 = rng.uniform(0.0, 0.6, size=3)
    gx, gy = rng.uniform(-0.3, 0.3, size=(2, 3))
    bg = g0 + gx * (xs[..., None] / side) + gy * (ys[..., None] / side)

    size = rng.uniform(6.0, 10.0)
    cy, cx = c + rng.uniform(-5, 5), c + rng.uniform(-5, 5)
    ang = rng.uniform(-0.35, 0.35) if cls in (6, 7) else rng.uniform(0, 2 * np.pi)
    if cls in (1, 4, 9):
        ang = rng.uniform(-0.3, 0.3)
    ca, sa = np.cos(ang), np.sin(ang)
    u = ca * (xs - cx) + sa * (ys - cy)
    v = -sa * (xs - cx) + ca * (ys - cy)
    mask = _shape_mask(cls, u, v, size)

    fg = rng.uniform(0.0, 1.0, size=3)
    # keep foreground visibly distinct from background mean
    while np.abs(fg - bg.mean(axis=(0, 1))).max() < 0.35:
        fg = rng.uniform(0.0, 1.0, size=3)
    img = np.where(mask[..., None], fg, bg)
    img = img + rng.normal(0.0, 0.06, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(n_per_class: int, seed: int = 0, side: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Return (images N x side x side x 3, labels N) in a seeded shuffled order."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(CLASS_NAMES)), n_per_class)
    rng.shuffle(labels)
    images = np.stack([render(int(k), rng, side) for k in labels])
    return images, labels.astype(np.int64)
