"""Synthetic two-subject relation videos with exact masks, plus the
rule-based oracle that classifies a video's relation from trajectories.

Five relations over four flat shapes on a black canvas.  Trajectories
are constructed analytically so each relation's defining property holds
by construction: approach/separate move the centroids monotonically,
orbit keeps the distance fixed while the angle advances, follow shares
one velocity with a constant offset, collide approaches until the two
footprints merge in the final quarter of the clip.  Subject 1 renders
at intensity 1.0 and subject 2 at 0.8, and the per-frame masks are the
exact rasterized footprints.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, stats

from . import vocab as vb
from .container import read_container, write_container
from .errors import ConfigError, DataError
from .masks import MaskSet

RELATIONS = vb.RELATIONS
SHAPES = vb.SHAPES

# shape footprints keep within this radius of their center (the square
# corner is the worst case at 2.8 * sqrt(2))
_SHAPE_RADIUS = 4.0
_MARGIN = _SHAPE_RADIUS + 0.5
_EIGHT = np.ones((3, 3), dtype=int)   # 8-connectivity for components


@dataclass
class RelationSpec:
    """Seeded recipe for one video; unset trajectory fields are drawn."""

    relation: str
    shape1: str = "circle"
    shape2: str = "square"
    seed: int = 0
    speed: float | None = None
    start1: tuple | None = None
    start2: tuple | None = None
    orbit_radius: float | None = None

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ConfigError(
                f"unknown relation {self.relation!r}; expected one of "
                f"{', '.join(RELATIONS)}"
            )
        for s in (self.shape1, self.shape2):
            if s not in SHAPES:
                raise ConfigError(
                    f"unknown shape {s!r}; expected one of {', '.join(SHAPES)}"
                )


@dataclass
class DatasetEntry:
    video: np.ndarray          # (F, H, W, 1) in [0, 1]
    masks: MaskSet
    prompt: list               # token ids
    relation_id: str
    spec: dict = field(default_factory=dict)
    uid: str = ""


# ---- shape rasterization ----


def _footprint(shape: str, cx: float, cy: float, hh: int, ww: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return (dx * dx + dy * dy) <= 3.2 ** 2
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 2.8
    if shape == "triangle":
        # equilateral, apex up (toward smaller y), circumradius 3.4
        r = 3.4
        base = dy <= r * 0.5
        left = (dy + np.sqrt(3.0) * dx) >= -r
        right = (dy - np.sqrt(3.0) * dx) >= -r
        return base & left & right
    if shape == "cross":
        arm = (np.abs(dx) <= 1.1) & (np.abs(dy) <= 3.4)
        bar = (np.abs(dy) <= 1.1) & (np.abs(dx) <= 3.4)
        return arm | bar
    raise ConfigError(f"unknown shape {shape!r}")


# ---- trajectory construction ----


def _center(rng, hh, ww, spread=1.0):
    return np.array([
        ww / 2.0 + rng.uniform(-spread, spread),
        hh / 2.0 + rng.uniform(-spread, spread),
    ])


def _trajectories(spec: RelationSpec, frames: int, hh: int, ww: int,
                  rng: np.random.Generator):
    """Per-frame center pairs [(x1, y1)], [(x2, y2)] for one relation."""
    rel = spec.relation
    ts = np.arange(frames, dtype=np.float64)
    if rel in ("approach", "separate"):
        c = _center(rng, hh, ww)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        g0 = rng.uniform(8.5, 9.4)
        # closest half-gap: 2*4.7 leaves > sqrt(2) px of clearance even
        # for the widest footprint pair, so components never bridge
        gf = rng.uniform(4.7, 5.0)
        if rel == "separate":
            g0, gf = gf, g0
        g = g0 + (gf - g0) * ts / (frames - 1)
        p1 = c[None, :] - g[:, None] * u[None, :]
        p2 = c[None, :] + g[:, None] * u[None, :]
    elif rel == "orbit":
        c = _center(rng, hh, ww, spread=0.5)
        radius = spec.orbit_radius if spec.orbit_radius is not None \
            else rng.uniform(8.2, 8.8)
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        omega = rng.uniform(0.30, 0.42) * (1.0 if rng.random() < 0.5 else -1.0)
        ang = theta0 + omega * ts
        p1 = np.tile(c, (frames, 1))
        p2 = c[None, :] + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif rel == "follow":
        speed = spec.speed if spec.speed is not None else rng.uniform(0.9, 1.25)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        vel = speed * np.array([np.cos(phi), np.sin(phi)])
        off_len = rng.uniform(9.5, 10.5)
        psi = rng.uniform(0.0, 2.0 * np.pi)
        off = off_len * np.array([np.cos(psi), np.sin(psi)])
        lo, hi = _MARGIN + 0.5, min(hh, ww) - 1 - _MARGIN - 0.5
        p0 = np.empty(2)
        for ax in range(2):
            move = vel[ax] * (frames - 1)
            a = max(lo - min(0.0, move), lo + off[ax] - min(0.0, move))
            b = min(hi - max(0.0, move), hi + off[ax] - max(0.0, move))
            if a > b:
                raise ConfigError("follow trajectory does not fit the frame")
            p0[ax] = rng.uniform(a, b)
        p1 = p0[None, :] + ts[:, None] * vel[None, :]
        p2 = p1 - off[None, :]
    elif rel == "collide":
        c = _center(rng, hh, ww)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        d0 = rng.uniform(16.5, 18.5)
        merged = max(1, frames // 4)        # final-quarter overlap
        pre = frames - merged
        d = np.empty(frames)
        d[:pre] = d0 + (8.1 - d0) * ts[:pre] / max(pre - 1, 1)
        d[pre:] = np.linspace(3.0, 1.5, merged)
        half = d / 2.0
        p1 = c[None, :] - half[:, None] * u[None, :]
        p2 = c[None, :] + half[:, None] * u[None, :]
    else:  # pragma: no cover - guarded by RelationSpec
        raise ConfigError(f"unknown relation {rel!r}")

    if spec.start1 is not None:
        p1 = p1 - p1[0][None, :] + np.asarray(spec.start1, dtype=np.float64)
    if spec.start2 is not None:
        p2 = p2 - p2[0][None, :] + np.asarray(spec.start2, dtype=np.float64)
    return p1, p2


def gen_video(spec: RelationSpec, frames: int = 8, height: int = 32,
              width: int = 32) -> DatasetEntry:
    """Render one relation video plus exact per-subject masks."""
    if frames < 4:
        raise ConfigError(f"need a frame budget of at least 4, got {frames}")
    if height < 32 or width < 32:
        raise ConfigError(
            f"canvas {height}x{width} too small; trajectories need >= 32x32"
        )
    rng = np.random.default_rng(spec.seed)
    p1, p2 = _trajectories(spec, frames, height, width, rng)

    for name, traj in (("subject1", p1), ("subject2", p2)):
        if (traj < _MARGIN).any() or (traj[:, 0] > width - 1 - _MARGIN).any() \
                or (traj[:, 1] > height - 1 - _MARGIN).any():
            raise ConfigError(
                f"{name} trajectory leaves the frame for spec {spec}"
            )
    if np.allclose(p1[0], p2[0]):
        raise ConfigError("subjects may not share a start position")

    m1 = np.zeros((frames, height, width))
    m2 = np.zeros((frames, height, width))
    for i in range(frames):
        m1[i] = _footprint(spec.shape1, p1[i, 0], p1[i, 1], height, width)
        m2[i] = _footprint(spec.shape2, p2[i, 0], p2[i, 1], height, width)
    video = np.maximum(m1 * 1.0, m2 * 0.8)[..., None]
    masks = MaskSet(m_s1=m1, m_s2=m2)
    prompt = vb.prompt_ids(spec.shape1, spec.relation, spec.shape2)
    return DatasetEntry(video=video, masks=masks, prompt=prompt,
                        relation_id=spec.relation, spec=asdict(spec))


# ---- rule-based relation oracle ----


def _frame_components(frame: np.ndarray, thr: float):
    """Centroids (x, y) of the significant bright components."""
    bw = frame > thr
    labels, n = ndimage.label(bw, structure=_EIGHT)
    if n == 0:
        return []
    sizes = ndimage.sum_labels(np.ones_like(frame), labels, range(1, n + 1))
    biggest = sizes.max()
    keep = [i + 1 for i in range(n)
            if sizes[i] >= max(4.0, 0.25 * biggest)]
    cents = ndimage.center_of_mass(bw, labels, keep)   # (y, x) pairs
    order = np.argsort([-sizes[i - 1] for i in keep])
    return [np.array([cents[j][1], cents[j][0]]) for j in order]


def _track(frames_comps):
    """Assign stable identities to the two centroids across frames."""
    pairs = {}
    prev = None
    for idx, comps in enumerate(frames_comps):
        if len(comps) != 2:
            continue
        a, b = comps[0], comps[1]
        if prev is not None:
            keep = (np.linalg.norm(a - prev[0]) + np.linalg.norm(b - prev[1]))
            swap = (np.linalg.norm(b - prev[0]) + np.linalg.norm(a - prev[1]))
            if swap < keep:
                a, b = b, a
        else:
            # first sighting: stable lexicographic order
            if (b[1], b[0]) < (a[1], a[0]):
                a, b = b, a
        pairs[idx] = (a, b)
        prev = (a, b)
    return pairs


def relation_oracle(video, threshold_ratio: float = 0.5) -> str:
    """Classify a video's relation from bright-component trajectories.

    Rules, in order: a merged tail after a shrinking two-component
    prefix is a collide; otherwise two components must be detectable in
    at least 80% of frames, then Kendall tau of the centroid distance
    series picks approach (<= -0.6) or separate (>= 0.6), a constant
    distance with more than pi/2 of angular sweep picks orbit, and a
    constant offset vector with real motion picks follow.  Anything
    else is unknown.

    Distance trends only count when the series also moves materially
    (relative range >= 0.2); tau is scale-free, so without that gate a
    monotone run of sub-pixel rasterization jitter in a constant-radius
    orbit can masquerade as approach or separate.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4:
        video = video[..., 0]
    if video.ndim != 3:
        raise ConfigError(f"video must be (F, H, W[, C]), got {video.shape}")
    n_frames = video.shape[0]
    vmax = video.max()
    if vmax <= 0:
        return "unknown"
    thr = threshold_ratio * vmax

    comps = [_frame_components(video[i], thr) for i in range(n_frames)]
    pairs = _track(comps)
    valid = sorted(pairs)

    # collide: two-component prefix that shrinks, then a single merged
    # blob through the end of the clip
    tail = 0
    for i in range(n_frames - 1, -1, -1):
        if len(comps[i]) == 1:
            tail += 1
        else:
            break
    if tail >= 1 and valid:
        prefix = [i for i in valid if i < n_frames - tail]
        if len(prefix) >= max(3, (n_frames - tail) // 2):
            d_pre = np.array([np.linalg.norm(pairs[i][0] - pairs[i][1])
                              for i in prefix])
            tau_pre = _kendall(prefix, d_pre)
            if tau_pre is not None and tau_pre <= -0.6 \
                    and _rel_span(d_pre) >= 0.2:
                return "collide"

    if len(valid) < 0.8 * n_frames or len(valid) < 3:
        return "unknown"

    d = np.array([np.linalg.norm(pairs[i][0] - pairs[i][1]) for i in valid])
    tau = _kendall(valid, d)
    if tau is not None and _rel_span(d) >= 0.2:
        if tau <= -0.6:
            return "approach"
        if tau >= 0.6:
            return "separate"

    cv_d = d.std() / d.mean() if d.mean() > 0 else np.inf
    offsets = np.array([pairs[i][1] - pairs[i][0] for i in valid])
    ang = np.unwrap(np.arctan2(offsets[:, 1], offsets[:, 0]))
    sweep = abs(ang[-1] - ang[0])
    if cv_d < 0.1 and sweep > np.pi / 2:
        return "orbit"

    cv_off = np.sqrt(offsets[:, 0].var() + offsets[:, 1].var()) / d.mean() \
        if d.mean() > 0 else np.inf
    moved = [np.abs(np.diff(np.array([pairs[i][j] for i in valid]), axis=0))
             .sum(axis=1).mean() if len(valid) > 1 else 0.0
             for j in (0, 1)]
    if cv_off < 0.15 and min(moved) >= 0.3:
        return "follow"
    return "unknown"


def _rel_span(d):
    m = d.mean()
    return (d.max() - d.min()) / m if m > 0 else 0.0


def _kendall(x, y):
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2 or np.allclose(y, y[0]):
        return None
    tau = stats.kendalltau(np.asarray(x, dtype=np.float64), y).statistic
    return None if np.isnan(tau) else float(tau)


# ---- evaluation metrics ----


def temporal_consistency(video) -> float:
    """Mean cosine similarity between consecutive flattened frames."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4:
        video = video.reshape(video.shape[0], -1)
    elif video.ndim == 3:
        video = video.reshape(video.shape[0], -1)
    else:
        raise ConfigError(f"video must be (F, H, W[, C]), got {video.shape}")
    if video.shape[0] < 2:
        raise ConfigError("need at least two frames")
    sims = []
    for a, b in zip(video[:-1], video[1:]):
        if np.array_equal(a, b):
            sims.append(1.0)
            continue
        if np.array_equal(a, -b):
            sims.append(-1.0)
            continue
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            warnings.warn(
                "temporal_consistency: zero-norm frame pair skipped",
                RuntimeWarning,
                stacklevel=2,
            )
            continue
        sims.append(float(np.clip(a @ b / (na * nb), -1.0, 1.0)))
    return float(np.mean(sims)) if sims else 0.0


def relation_accuracy(videos, expected: str) -> float:
    """Fraction of videos the oracle classifies as ``expected``."""
    if expected not in RELATIONS:
        raise ConfigError(f"unknown relation {expected!r}")
    if not videos:
        raise ConfigError("no videos to evaluate")
    hits = sum(1 for v in videos if relation_oracle(v) == expected)
    return hits / len(videos)


# ---- dataset layout ----


def write_dataset(entries, root):
    """One subdirectory per entry: video.ntv, masks.ntv, meta.json."""
    os.makedirs(root, exist_ok=True)
    for i, e in enumerate(entries):
        sub = os.path.join(root, f"entry_{i:05d}")
        os.makedirs(sub, exist_ok=True)
        write_container(os.path.join(sub, "video.ntv"), {"video": e.video})
        write_container(
            os.path.join(sub, "masks.ntv"),
            {"m_s1": e.masks.m_s1, "m_s2": e.masks.m_s2, "m_r": e.masks.m_r},
        )
        meta = {
            "relation": e.relation_id,
            "prompt": [int(t) for t in e.prompt],
            "spec": e.spec,
            "format_version": 1,
        }
        with open(os.path.join(sub, "meta.json"), "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)


def read_dataset(root):
    """Load every entry directory under ``root``, sorted by name."""
    if not os.path.isdir(root):
        raise DataError(f"dataset directory {root} does not exist")
    entries = []
    for name in sorted(os.listdir(root)):
        sub = os.path.join(root, name)
        if not os.path.isdir(sub):
            continue
        meta_path = os.path.join(sub, "meta.json")
        if not os.path.isfile(meta_path):
            continue
        try:
            with open(meta_path) as f:
                meta = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{name}: meta.json is not valid JSON: {exc}")
        for key in ("relation", "prompt", "format_version"):
            if key not in meta:
                raise DataError(f"{name}: meta.json missing key {key!r}")
        if meta["format_version"] != 1:
            raise DataError(
                f"{name}: unsupported format_version {meta['format_version']}"
            )
        if meta["relation"] not in RELATIONS:
            raise DataError(f"{name}: unknown relation {meta['relation']!r}")
        vid, _ = read_container(os.path.join(sub, "video.ntv"))
        msk, _ = read_container(os.path.join(sub, "masks.ntv"))
        if "video" not in vid:
            raise DataError(f"{name}: video.ntv has no 'video' entry")
        for key in ("m_s1", "m_s2", "m_r"):
            if key not in msk:
                raise DataError(f"{name}: masks.ntv has no {key!r} entry")
            if msk[key].shape != vid["video"].shape[:3]:
                raise DataError(
                    f"{name}: mask {key} shape {msk[key].shape} does not "
                    f"match video {vid['video'].shape[:3]}"
                )
        masks = MaskSet(m_s1=msk["m_s1"], m_s2=msk["m_s2"], m_r=msk["m_r"])
        entries.append(DatasetEntry(
            video=vid["video"], masks=masks, prompt=list(meta["prompt"]),
            relation_id=meta["relation"], spec=meta.get("spec", {}), uid=name,
        ))
    return entries
