"""Weight-subspace similarity and activation-map extraction.

The SVD here is self-contained: a cyclic Jacobi eigensolver runs on the
Gram matrix of the smaller side, which is plenty for the desk-scale
matrices this package produces (hundreds of rows, not thousands).
Subspace similarity follows the projection-overlap form
(1/r) * ||U1_r^T U2_r||_F^2, which is 1 for identical column spans and
0 for orthogonal ones, and is invariant to any invertible mixing of
the columns within a span.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, VocabError

_QKV = ("q", "k", "v")


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if not np.isfinite(a).all():
        raise ConfigError("jacobi_eigh: input has non-finite entries")
    n = a.shape[0]
    a = a.copy()
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    limit = tol * np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off <= limit:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # standard two-sided rotation that zeroes a[p, q]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    vals = a.diagonal().copy()
    order = np.argsort(-vals)
    return vals[order], v[:, order]


def svd(w):
    """Thin SVD built on the Jacobi eigensolver.

    Returns (U, S, V) with w ~= U @ diag(S) @ V.T, singular values
    descending, and a deterministic sign convention: the largest-
    magnitude component of each left singular vector is positive.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"svd needs a matrix, got {w.shape}")
    if not np.isfinite(w).all():
        raise ConfigError("svd: input has non-finite entries")
    m, n = w.shape
    if m <= n:
        vals, u = jacobi_eigh(w @ w.T)
        s = np.sqrt(np.clip(vals, 0.0, None))
        v = _other_side(w.T, u, s)
    else:
        vals, v = jacobi_eigh(w.T @ w)
        s = np.sqrt(np.clip(vals, 0.0, None))
        u = _other_side(w, v, s)
    # sign convention keyed to the left vectors
    for j in range(s.size):
        i = np.argmax(np.abs(u[:, j]))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, s, v


def _other_side(wt, u, s):
    """Columns wt @ u_j / s_j, with orthonormal completion for zero s."""
    k = s.size
    out = np.zeros((wt.shape[0], k))
    tol = max(wt.shape) * np.finfo(np.float64).eps * (s[0] if k else 0.0)
    for j in range(k):
        if s[j] > tol and s[j] > 0.0:
            out[:, j] = wt @ u[:, j] / s[j]
        else:
            out[:, j] = _complete(out[:, :j], wt.shape[0], j)
    return out


def _complete(existing, dim, j):
    """A unit vector orthogonal to the given columns (deterministic)."""
    for k in range(dim):
        cand = np.zeros(dim)
        cand[(j + k) % dim] = 1.0
        if existing.shape[1]:
            cand -= existing @ (existing.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            return cand / norm
    raise ConfigError("could not complete an orthonormal basis")


def subspace_similarity(w1, w2, r: int) -> float:
    """(1/r) * ||U1_r^T U2_r||_F^2 over the top-r left singular vectors."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.ndim != 2 or w2.ndim != 2 or w1.shape[0] != w2.shape[0]:
        raise ShapeError(
            f"weights must share the row dimension, got {w1.shape} vs {w2.shape}"
        )
    if r < 1 or r > min(*w1.shape) or r > min(*w2.shape):
        raise ConfigError(
            f"rank {r} must lie in [1, {min(min(w1.shape), min(w2.shape))}]"
        )
    u1 = svd(w1)[0][:, :r]
    u2 = svd(w2)[0][:, :r]
    val = np.sum((u1.T @ u2) ** 2) / r
    return float(min(max(val, 0.0), 1.0))


# ---- Q/K/V similarity report ----


@dataclass
class SimilarityGrid:
    """Pairwise Q/K/V similarity for one layer and branch."""

    layer: object            # int or "all"
    branch: str
    rank: int
    matrix: np.ndarray       # 3x3, order (q, k, v)


def effective_weight(checkpoint, layer: int, branch: str, matrix: str,
                     include_adapters: bool = True) -> np.ndarray:
    """Base projection weight plus every merged adapter delta."""
    name = f"base/layer{layer}/{branch}/{matrix}/w"
    if name not in checkpoint.base_params:
        raise ConfigError(f"checkpoint has no weight {name}")
    w = checkpoint.base_params[name].data.copy()
    if include_adapters and checkpoint.triplet is not None:
        for a in checkpoint.triplet.adapters_for(layer, matrix, branch):
            w += a.scale * (a.down.data.T @ a.up.data.T)
    return w


def qkv_similarity_report(checkpoint, rank: int = 16,
                          include_adapters: bool = True):
    """Pairwise Q/K/V subspace similarities per layer and branch.

    Returns a list of SimilarityGrid (one per layer/branch plus one
    "all"-layer mean per branch).
    """
    cfg = checkpoint.model_config
    grids = []
    per_branch = {"text": [], "vision": []}
    for layer in range(cfg.layers):
        for branch in ("text", "vision"):
            ws = {m: effective_weight(checkpoint, layer, branch, m,
                                      include_adapters) for m in _QKV}
            mat = np.empty((3, 3))
            for i, mi in enumerate(_QKV):
                for j, mj in enumerate(_QKV):
                    if j < i:
                        mat[i, j] = mat[j, i]
                    else:
                        mat[i, j] = subspace_similarity(ws[mi], ws[mj], rank)
            grids.append(SimilarityGrid(layer, branch, rank, mat))
            per_branch[branch].append(mat)
    for branch in ("text", "vision"):
        mean = np.mean(per_branch[branch], axis=0)
        grids.append(SimilarityGrid("all", branch, rank, mean))
    return grids


def similarity_rows(grids):
    """Flatten grids to (layer, branch, pair, rank, similarity) rows."""
    rows = []
    for g in grids:
        for i, mi in enumerate(_QKV):
            for j, mj in enumerate(_QKV):
                if j < i:
                    continue
                pair = f"{mi.upper()}{mj.upper()}"
                rows.append((g.layer, g.branch, pair, g.rank,
                             float(g.matrix[i, j])))
    return rows


def write_similarity_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "branch", "pair", "rank", "similarity"])
        for layer, branch, pair, rank, sim in rows:
            w.writerow([layer, branch, pair, rank, f"{sim:.9f}"])


# ---- activation maps ----


def feature_map(record, which: str = "q") -> np.ndarray:
    """Mean absolute Q/K/V activation per spatial cell, (h, w)."""
    if which not in _QKV:
        raise ConfigError(f"feature kind must be one of {_QKV}, got {which!r}")
    source = {"q": record.q, "k": record.k, "v": record.v}[which]
    if not source:
        raise ConfigError("attention record is empty; run a recorded forward")
    f, h, w = record.grid
    acc = np.zeros(f * h * w)
    for layer_act in source:          # (heads, Nv, dh)
        acc += np.abs(layer_act).mean(axis=(0, 2))
    acc /= len(source)
    return acc.reshape(f, h, w).mean(axis=0)


def attention_map(record, token_id: int) -> np.ndarray:
    """Per-frame attention between one prompt token and vision cells.

    Averages the text-to-vision attention row with the vision-to-text
    column over layers and heads; output shape (f, h, w).
    """
    if not record.attn_text_rows:
        raise ConfigError("attention record is empty; run a recorded forward")
    if token_id not in record.text_ids:
        from . import vocab as vb

        try:
            shown = repr(vb.decode([token_id])[0])
        except VocabError:
            shown = f"id {token_id}"
        words = vb.decode([i for i in record.text_ids if i != vb.NULL_ID])
        raise VocabError(
            f"token {shown} not in the recorded prompt {words}"
        )
    pos = record.text_ids.index(token_id)
    f, h, w = record.grid
    n_txt = record.text_len
    from_text = np.zeros(f * h * w)
    to_text = np.zeros(f * h * w)
    for rows, cols in zip(record.attn_text_rows, record.attn_vis_to_text):
        from_text += rows[:, pos, n_txt:].mean(axis=0)
        to_text += cols[:, :, pos].mean(axis=0)
    from_text /= len(record.attn_text_rows)
    to_text /= len(record.attn_vis_to_text)
    return (0.5 * (from_text + to_text)).reshape(f, h, w)


def write_map_csv(maps, path):
    """Write (f, h, w) or (h, w) maps as frame,row,col,value rows.

    A 2-d map is written with frame = -1 (the over-frames mean).
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None, ...]
        frame_ids = [-1]
    elif maps.ndim == 3:
        frame_ids = list(range(maps.shape[0]))
    else:
        raise ShapeError(f"maps must be 2-d or 3-d, got {maps.shape}")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "row", "col", "value"])
        for fi, frame in zip(frame_ids, maps):
            for r in range(frame.shape[0]):
                for c in range(frame.shape[1]):
                    w.writerow([fi, r, c, f"{frame[r, c]:.9g}"])
