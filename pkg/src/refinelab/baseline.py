"""ShrinkPad: shrink the image, zero-pad back to size at a random offset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ShrinkPadConfig:
    pad_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.pad_size < 0:
            raise ValueError("pad size must be nonnegative")


def shrinkpad(images: np.ndarray, cfg: ShrinkPadConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Bilinear resize to (H - 2S, W - 2S) then zero-pad at an offset drawn from [0, 2S]^2.

    Accepts one HWC image or an NHWC batch; each image gets its own offset.
    `rng` defaults to a generator seeded from `cfg.seed`, so repeated calls
    with the same config place pads identically.
    """
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c = x.shape
    s = cfg.pad_size
    if 2 * s >= min(h, w):
        raise ValueError(f"pad size {s} too large for {h}x{w} images")
    if s == 0:
        return x[0].copy() if single else x.copy()
    rng = rng or np.random.default_rng(cfg.seed)
    t = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
    small = F.interpolate(t, size=(h - 2 * s, w - 2 * s), mode="bilinear", align_corners=False)
    small = small.clamp(0.0, 1.0).numpy().transpose(0, 2, 3, 1)
    out = np.zeros_like(x)
    offsets = rng.integers(0, 2 * s + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(offsets):
        out[i, dy : dy + h - 2 * s, dx : dx + w - 2 * s] = small[i]
    return out[0] if single else out
