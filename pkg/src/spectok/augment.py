"""Training-time spectrogram augmentation: MixUp and SpecAugment-style masks.

Both operate on standardized log-mel arrays (n_mels, n_frames) and take a
numpy Generator so runs are reproducible. MixUp draws lambda ~ Beta(a, a)
and mixes both the features and the (possibly already smoothed) targets.
Masking zeroes whole contiguous frame/bin blocks of a fixed extent; zero is
the per-instance mean after standardization, so masks erase rather than
inject energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    mixup_alpha: float = 2.5
    mixup_prob: float = 0.5
    n_time_masks: int = 2
    n_freq_masks: int = 1
    time_mask_size: int = 8
    freq_mask_size: int = 8
    mask_prob: float = 0.5

    def __post_init__(self):
        if self.mixup_alpha <= 0:
            raise ValueError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        for name in ("mixup_prob", "mask_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_time_masks < 0 or self.n_freq_masks < 0:
            raise ValueError("mask counts must be non-negative")
        if self.time_mask_size < 0 or self.freq_mask_size < 0:
            raise ValueError("mask sizes must be non-negative")


def mixup(
    values_a: np.ndarray,
    values_b: np.ndarray,
    label_a: float,
    label_b: float,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Mix two examples with probability mixup_prob; else return a unchanged."""
    if values_a.shape != values_b.shape:
        raise ValueError(f"shape mismatch {values_a.shape} vs {values_b.shape}")
    if rng.random() >= cfg.mixup_prob:
        return values_a, float(label_a)
    lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    mixed = lam * values_a + (1.0 - lam) * values_b
    return mixed, lam * float(label_a) + (1.0 - lam) * float(label_b)


def _mask_axis(values, axis, n_masks, size, prob, rng):
    extent = values.shape[axis]
    for _ in range(n_masks):
        if rng.random() >= prob:
            continue
        width = min(size, extent)
        if width == 0:
            continue
        start = int(rng.integers(0, extent - width + 1))
        if axis == 0:
            values[start : start + width, :] = 0.0
        else:
            values[:, start : start + width] = 0.0
    return values


def spec_augment(values: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply time then frequency masks, each independently with mask_prob."""
    out = values.copy()
    _mask_axis(out, 1, cfg.n_time_masks, cfg.time_mask_size, cfg.mask_prob, rng)
    _mask_axis(out, 0, cfg.n_freq_masks, cfg.freq_mask_size, cfg.mask_prob, rng)
    return out
