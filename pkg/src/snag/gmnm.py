"""Gauss modality noise masking and the dropout substitute used in ablations."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .numkit import Tensor

MODES = ("gmnm", "dropout", "off")


@dataclass
class NoiseConfig:
    rho: float = 0.2
    epsilon: float = 0.7
    mode: str = "gmnm"
    modalities: tuple[str, ...] = ("g", "r", "a", "v", "s")
    dropout: float = 0.1
    dropout_rescale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.mode not in MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.modalities = tuple(self.modalities)

    def applies_to(self, modality: str) -> bool:
        return self.mode != "off" and modality in self.modalities


def noise_rng(seed: int, epoch: int, modality: str, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, epoch, modality) so masking never perturbs other draws."""
    return np.random.default_rng([seed, epoch, zlib.crc32(modality.encode()), stream, 0x6E6F])


def sample_gmnm(num_rows: int, mean, std, rho: float, epsilon: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-row affine masking coefficients ``(scale, offset)``.

    ``x_hat = scale[:, None] * x + offset``: unmasked rows get scale 1 and zero
    offset, masked rows get ``1 - epsilon`` and ``epsilon * (std * z + mean)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if (std < 0).any():
        raise ValueError("standard deviations must be non-negative")
    p = rng.uniform(size=num_rows)
    masked = p < rho  # p == rho has probability zero; strict keeps rho=0 exact
    z = rng.normal(size=(num_rows, mean.shape[-1]))
    scale = np.where(masked, 1.0 - epsilon, 1.0)
    offset = np.where(masked[:, None], epsilon * (std * z + mean), 0.0)
    return scale, offset


def apply_gmnm(x, mean, std, cfg: NoiseConfig, rng: np.random.Generator):
    """Mask rows of ``x`` (array or Tensor) with Gaussian noise matched to (mean, std).

    Each row is kept with probability ``1 - rho``; otherwise it becomes
    ``(1 - eps) x + eps (std * z + mean)`` with fresh z ~ N(0, I).
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    scale, offset = sample_gmnm(len(data), mean, std, cfg.rho, cfg.epsilon, rng)
    if isinstance(x, Tensor):
        if (scale == 1.0).all():
            return x
        return x * scale[:, None] + offset
    if (scale == 1.0).all():
        return data.copy()
    return scale[:, None] * data + offset


def apply_dropout(x, p: float, rng: np.random.Generator, rescale: bool = False):
    """Zero each entry independently with probability ``p`` (optionally rescale survivors)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    keep = (rng.uniform(size=data.shape) >= p).astype(np.float64)
    if rescale:
        keep /= 1.0 - p
    if isinstance(x, Tensor):
        return x * keep
    return data * keep


def perturb(x, modality: str, mean, std, cfg: NoiseConfig, seed: int, epoch: int):
    """Apply the configured noise mode to one modality for one epoch."""
    if not cfg.applies_to(modality):
        return x
    rng = noise_rng(seed, epoch, modality)
    if cfg.mode == "dropout":
        return apply_dropout(x, cfg.dropout, rng, cfg.dropout_rescale)
    return apply_gmnm(x, mean, std, cfg, rng)
