"""Spatio-temporal subject masks and the mask-weighted denoising loss.

Masks live on the pixel grid as float arrays in [0, 1] with shape
(frames, height, width).  The relation mask is the elementwise union of
the two subject masks; latent-resolution masks are block means over the
same cells the patchifier folds together, so mask mass is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError

MASK_KINDS = ("relation", "subject1", "subject2")


def _check_mask(m, name):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3:
        raise ShapeError(f"{name} must be (frames, height, width), got {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ConfigError(f"{name} values must lie in [0, 1]")
    return m


def relation_mask(m_s1, m_s2) -> np.ndarray:
    """Elementwise union (max) of the two subject masks."""
    m_s1 = _check_mask(m_s1, "m_s1")
    m_s2 = _check_mask(m_s2, "m_s2")
    if m_s1.shape != m_s2.shape:
        raise ShapeError(f"mask shapes disagree: {m_s1.shape} vs {m_s2.shape}")
    return np.maximum(m_s1, m_s2)


def to_latent(mask, t_c: int, p: int) -> np.ndarray:
    """Block-mean a pixel mask down to latent resolution (f, h, w)."""
    mask = _check_mask(mask, "mask")
    fr, hh, ww = mask.shape
    if fr % t_c or hh % p or ww % p:
        raise ShapeError(
            f"mask shape {mask.shape} not divisible by (t_c={t_c}, p={p}, p={p})"
        )
    blocks = mask.reshape(fr // t_c, t_c, hh // p, p, ww // p, p)
    return blocks.mean(axis=(1, 3, 5))


@dataclass
class MaskSet:
    """Per-subject masks plus their union, all on the pixel grid."""

    m_s1: np.ndarray
    m_s2: np.ndarray
    m_r: np.ndarray = field(default=None)

    def __post_init__(self):
        self.m_s1 = _check_mask(self.m_s1, "m_s1")
        self.m_s2 = _check_mask(self.m_s2, "m_s2")
        if self.m_r is None:
            self.m_r = relation_mask(self.m_s1, self.m_s2)
        else:
            self.m_r = _check_mask(self.m_r, "m_r")

    def pixel(self, kind: str) -> np.ndarray:
        if kind == "relation":
            return self.m_r
        if kind == "subject1":
            return self.m_s1
        if kind == "subject2":
            return self.m_s2
        raise ConfigError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")

    def latent(self, kind: str, t_c: int, p: int) -> np.ndarray:
        return to_latent(self.pixel(kind), t_c, p)


def masked_loss(eps, eps_hat, latent_mask, lam: float):
    """Mean of (lam * M + 1) * (eps - eps_hat)^2 over all latent elements.

    ``latent_mask`` has shape (f, h, w) and broadcasts over the channel
    axis; lam = 0 reduces exactly to the unweighted denoising loss.
    """
    if lam < 0:
        raise ConfigError(f"mask weight must be >= 0, got {lam}")
    eps = tz._wrap(eps)
    eps_hat = tz._wrap(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps shapes disagree: {eps.shape} vs {eps_hat.shape}")
    m = np.asarray(latent_mask, dtype=np.float64)
    if m.shape != eps.shape[:3]:
        raise ShapeError(
            f"latent mask {m.shape} does not match latent grid {eps.shape[:3]}"
        )
    if m.min() < 0.0 or m.max() > 1.0:
        raise ConfigError("latent mask values must lie in [0, 1]")
    diff = eps - eps_hat
    weight = tz.Tensor(lam * m[..., None] + 1.0)
    return (weight * diff * diff).mean()
