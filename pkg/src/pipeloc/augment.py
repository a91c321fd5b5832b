"""Stochastic feature-sequence augmentations for the contrastive views.

All functions take ``x`` of shape [T, 2D] and a boolean ``mask`` [T] and return
a new array; padded rows are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError


@dataclass
class AugConfig:
    mask_prob: float = 0.1
    shuffle_window: int = 8
    shuffle_prob: float = 0.5
    noise_sigma_aug: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("mask_prob", "shuffle_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"aug.{name}={v} must be in [0, 1]")
        if self.shuffle_window < 2:
            raise ConfigError("aug.shuffle_window must be >= 2")
        if self.noise_sigma_aug < 0:
            raise ConfigError("aug.noise_sigma_aug must be >= 0")


def mask_frames(x: np.ndarray, mask: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.array(x, copy=True)
    drop = (rng.random(len(mask)) < cfg.mask_prob) & mask
    out[drop] = 0
    return out


def shuffle_region(
    x: np.ndarray,
    mask: np.ndarray,
    cfg: AugConfig,
    rng: np.random.Generator,
    perm: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Permute the rows of one random window of ``shuffle_window`` valid frames.

    ``perm`` forces the permutation applied inside the window.
    """
    out = np.array(x, copy=True)
    valid = np.flatnonzero(mask)
    w = cfg.shuffle_window
    if len(valid) < w or rng.random() >= cfg.shuffle_prob:
        return out
    start = int(rng.integers(0, len(valid) - w + 1))
    idx = valid[start : start + w]
    if perm is None:
        perm = rng.permutation(w)
    out[idx] = x[idx[np.asarray(perm)]]
    return out


def mix_noise(x: np.ndarray, mask: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.array(x, copy=True)
    if cfg.noise_sigma_aug == 0:
        return out
    eps = rng.standard_normal(x.shape).astype(x.dtype) * np.asarray(cfg.noise_sigma_aug, x.dtype)
    out[mask] += eps[mask]
    return out


def random_aug(x: np.ndarray, mask: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """mask -> shuffle -> noise."""
    x = mask_frames(x, mask, cfg, rng)
    x = shuffle_region(x, mask, cfg, rng)
    return mix_noise(x, mask, cfg, rng)
