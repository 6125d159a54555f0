"""Relational contrastive loss over space-time features of model output.

Dynamics features are spatial means of consecutive-frame differences of
the predicted noise (one vector per frame pair); appearance features
are spatial means of single frames.  A FIFO memory bank collects both,
detached from the graph.  The loss is standard InfoNCE per anchor row:
dynamics features of the same relation from other videos are positives,
single-frame appearance features are negatives.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def frame_differences(eps_hat):
    """Consecutive frame differences: out[i] = eps_hat[i+1] - eps_hat[i]."""
    x = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    if x.ndim != 4:
        raise ShapeError(f"expected (f, h, w, c), got {x.shape}")
    if x.shape[0] < 2:
        raise ConfigError(
            f"need at least 2 latent frames for differences, got {x.shape[0]}"
        )
    return x[1:] - x[:-1]


def dynamics_features(diffs):
    """Spatial mean per frame pair and channel: (f-1, h, w, c) -> (f-1, c)."""
    x = diffs if isinstance(diffs, Tensor) else Tensor(diffs)
    if x.ndim != 4:
        raise ShapeError(f"expected (f-1, h, w, c), got {x.shape}")
    return x.mean(axis=(1, 2))


def appearance_features(eps_hat):
    """Spatial mean per single frame and channel: (f, h, w, c) -> (f, c)."""
    x = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    if x.ndim != 4:
        raise ShapeError(f"expected (f, h, w, c), got {x.shape}")
    return x.mean(axis=(1, 2))


def rcl_loss(anchors, positives, negatives, tau: float = 0.07):
    """Sum over anchor rows of -log(pos_mass / (pos_mass + neg_mass)).

    ``anchors`` is an (m, c) tensor (kept in the graph); positives and
    negatives are detached arrays shaped (n, c) for one shared set or
    (m, n, c) for per-row sets.  All features are L2-normalized before
    the dot products; similarities are divided by ``tau``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    a = anchors if isinstance(anchors, Tensor) else Tensor(anchors)
    if a.ndim != 2:
        raise ShapeError(f"anchors must be (m, c), got {a.shape}")
    m, c = a.shape
    p = _unit_rows(positives, c, m, "positives")
    n = _unit_rows(negatives, c, m, "negatives")

    a_hat = tz.l2_normalize(a, axis=-1)
    a3 = a_hat.reshape((m, 1, c))
    sim_p = (a3 * Tensor(p)).sum(axis=-1)   # (m, n_pos)
    sim_n = (a3 * Tensor(n)).sum(axis=-1)   # (m, n_neg)
    pos_mass = tz.exp(sim_p * (1.0 / tau)).sum(axis=1)
    neg_mass = tz.exp(sim_n * (1.0 / tau)).sum(axis=1)
    per_anchor = tz.log(pos_mass + neg_mass) - tz.log(pos_mass)
    return per_anchor.sum()


def _unit_rows(x, c, m, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = np.broadcast_to(x, (m,) + x.shape)
    if x.ndim != 3 or x.shape[0] != m or x.shape[2] != c:
        raise ShapeError(
            f"{name} must be (n, {c}) or ({m}, n, {c}), got {x.shape}"
        )
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if (norms == 0.0).any():
        warnings.warn(
            f"rcl_loss: zero-norm {name} row mapped to the zero vector",
            RuntimeWarning,
            stacklevel=3,
        )
    return x / np.where(norms == 0.0, 1.0, norms)


@dataclass
class BankEntry:
    """One detached 1-d feature with its provenance."""

    vector: np.ndarray
    relation_id: str
    role: str           # "dynamics" | "appearance"
    video_id: str
    frame_index: int
    timestep: int = -1


class MemoryBank:
    """Fixed-capacity FIFO queue of detached features."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ConfigError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._queue = deque(maxlen=capacity)

    def __len__(self):
        return len(self._queue)

    def entries(self):
        return list(self._queue)

    def push(self, entry: BankEntry):
        """Append; the oldest entry falls out once capacity is reached."""
        if entry.role not in ("dynamics", "appearance"):
            raise ConfigError(f"unknown bank role {entry.role!r}")
        v = np.asarray(entry.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"bank vectors must be 1-d, got {v.shape}")
        entry.vector = v.copy()
        self._queue.append(entry)

    def push_features(self, dynamics, appearance, relation_id: str,
                      video_id: str, timestep: int = -1):
        """Store a step's dynamics rows then appearance rows, in order."""
        for i, row in enumerate(np.asarray(dynamics, dtype=np.float64)):
            self.push(BankEntry(row, relation_id, "dynamics", video_id, i,
                                timestep))
        for i, row in enumerate(np.asarray(appearance, dtype=np.float64)):
            self.push(BankEntry(row, relation_id, "appearance", video_id, i,
                                timestep))


def sample_contrast(bank: MemoryBank, relation_id: str, n_pos: int,
                    n_neg: int, rng: np.random.Generator,
                    exclude_video: str = "", n_rows: int = 0):
    """Draw contrast sets from the bank, or signal a skip.

    Positives: ``n_pos`` dynamics entries with the same relation id from
    a different source video, one shared set drawn without replacement.
    Negatives: appearance entries from anywhere; drawn once when
    ``n_rows`` is 0, else independently per anchor row.  Returns
    (P, N) arrays or None when either pool is too small.
    """
    pos_pool = [e for e in bank.entries()
                if e.role == "dynamics" and e.relation_id == relation_id
                and e.video_id != exclude_video]
    neg_pool = [e for e in bank.entries() if e.role == "appearance"]
    if len(pos_pool) < n_pos or len(neg_pool) < n_neg:
        return None
    pos_idx = rng.choice(len(pos_pool), size=n_pos, replace=False)
    P = np.stack([pos_pool[i].vector for i in pos_idx])
    if n_rows:
        N = np.stack([
            np.stack([neg_pool[i].vector
                      for i in rng.choice(len(neg_pool), size=n_neg,
                                          replace=False)])
            for _ in range(n_rows)
        ])
    else:
        neg_idx = rng.choice(len(neg_pool), size=n_neg, replace=False)
        N = np.stack([neg_pool[i].vector for i in neg_idx])
    return P, N
