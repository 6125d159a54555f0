"""Low-rank adapters injected into attention and FFN projections.

A customization run trains three logical adapter groups plus an
always-on FFN group:

  * relation  -> query/key projections (steers how tokens attend)
  * subject1  -> value projections
  * subject2  -> value projections
  * ffn       -> both FFN projections and the attention output

Each training step activates one of {relation, subject1, subject2}
uniformly at random; the FFN group trains on every step.  At inference
the subject groups are dropped entirely so only the relation (and FFN)
adapters shape generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import BindingError, ConfigError
from .tensor import Tensor

MATRICES = ("q", "k", "v", "attn_out", "ffn_in", "ffn_out")
BRANCHES = ("text", "vision")
SETS = ("relation", "subject1", "subject2", "ffn")
FFN_MATRICES = ("ffn_in", "ffn_out", "attn_out")

# placements: which attention matrices the relation / subject groups
# target.  The FFN group is fixed.
PLACEMENTS = {
    "qk_v": (("q", "k"), ("v",)),
    "v_qk": (("v",), ("q", "k")),
    "q_kv": (("q",), ("k", "v")),
    "kv_q": (("k", "v"), ("q",)),
}
DEFAULT_PLACEMENT = "qk_v"


@dataclass
class LoraAdapter:
    """One rank-r adapter: delta(x) = scale * (x @ down.T) @ up.T.

    The down factor is Gaussian with variance 1/r and the up factor is
    zero, so a fresh adapter is an exact no-op.
    """

    down: Tensor  # (r, d_in)
    up: Tensor    # (d_out, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def apply(self, x):
        if self.down.shape[1] != x.shape[-1]:
            raise BindingError(
                f"adapter expects input width {self.down.shape[1]}, "
                f"got {x.shape[-1]}"
            )
        h = tz.matmul_t(x, self.down)
        return tz.matmul_t(h, self.up) * self.scale

    def is_noop(self) -> bool:
        return not np.any(self.up.data)


def init_adapter(d_in: int, d_out: int, rank: int, scale: float,
                 rng: np.random.Generator) -> LoraAdapter:
    if rank < 1 or rank > min(d_in, d_out):
        raise ConfigError(
            f"adapter rank {rank} must lie in [1, min({d_in}, {d_out})]"
        )
    down = tz.gaussian((rank, d_in), rng, std=np.sqrt(1.0 / rank))
    up = tz.zeros((d_out, rank))
    return LoraAdapter(down=down, up=up, scale=scale)


def apply_adapter(w, b, x, adapters):
    """Base projection x @ w (+ b) plus every adapter delta.

    In no-grad mode adapters that are still exact no-ops are skipped,
    which keeps inference with fresh or excluded adapters bitwise equal
    to the base forward.
    """
    y = tz.matmul(x, w)
    if b is not None:
        y = y + b
    for a in adapters:
        if not tz.grad_enabled() and a.is_noop():
            continue
        y = y + a.apply(x)
    return y


@dataclass
class Selection:
    """One training step's adapter choice."""

    choice: str                 # relation | subject1 | subject2
    trainable: list             # [(param name, Tensor)]
    mask_kind: str              # relation | subject1 | subject2


@dataclass
class TripletConfig:
    """All adapters of a customization run, grouped by logical set.

    ``sets`` maps set name -> {(layer, matrix, branch): LoraAdapter}.
    ``pattern`` records the subject/relation words this run binds to.
    """

    rank: int
    scale: float
    placement: str
    pattern: tuple = ("", "", "")
    sets: dict = field(default_factory=dict)

    def adapters_for(self, layer: int, matrix: str, branch: str) -> list:
        out = []
        for name in SETS:
            group = self.sets.get(name)
            if group:
                a = group.get((layer, matrix, branch))
                if a is not None:
                    out.append(a)
        return out

    def max_layer(self) -> int:
        layers = [key[0] for group in self.sets.values() for key in group]
        return max(layers) if layers else -1

    def named_params(self):
        """(name, Tensor) pairs; names are stable across save/load."""
        out = []
        for set_name in SETS:
            group = self.sets.get(set_name, {})
            for (layer, matrix, branch) in sorted(group):
                a = group[(layer, matrix, branch)]
                stem = f"lora/{set_name}/{branch}/layer{layer}/{matrix}"
                out.append((f"{stem}/down", a.down))
                out.append((f"{stem}/up", a.up))
        return out

    def set_params(self, set_names):
        out = []
        for set_name in set_names:
            group = self.sets.get(set_name, {})
            for (layer, matrix, branch) in sorted(group):
                a = group[(layer, matrix, branch)]
                stem = f"lora/{set_name}/{branch}/layer{layer}/{matrix}"
                out.append((f"{stem}/down", a.down))
                out.append((f"{stem}/up", a.up))
        return out

    def validate_for(self, n_layers: int, d_model: int):
        top = self.max_layer()
        if top >= n_layers:
            raise BindingError(
                f"triplet binds layer {top} but the model has {n_layers} layers"
            )
        for group in self.sets.values():
            for (layer, matrix, branch), a in group.items():
                if matrix not in MATRICES or branch not in BRANCHES:
                    raise BindingError(
                        f"bad binding (layer={layer}, matrix={matrix!r}, "
                        f"branch={branch!r})"
                    )


def init_triplet(n_layers: int, d_model: int, d_ff: int, rank: int = 16,
                 scale: float = 1.0, seed: int = 0,
                 placement: str = DEFAULT_PLACEMENT,
                 pattern=("", "", "")) -> TripletConfig:
    """Build a fresh (no-op) adapter triplet for an L-layer model."""
    if placement not in PLACEMENTS:
        raise ConfigError(
            f"unknown placement {placement!r}; expected one of "
            f"{sorted(PLACEMENTS)}"
        )
    rel_mats, subj_mats = PLACEMENTS[placement]
    rng = np.random.default_rng(seed)
    dims = {
        "q": (d_model, d_model),
        "k": (d_model, d_model),
        "v": (d_model, d_model),
        "attn_out": (d_model, d_model),
        "ffn_in": (d_model, d_ff),
        "ffn_out": (d_ff, d_model),
    }

    def build(mats):
        group = {}
        for layer in range(n_layers):
            for branch in BRANCHES:
                for m in mats:
                    d_in, d_out = dims[m]
                    group[(layer, m, branch)] = init_adapter(
                        d_in, d_out, rank, scale, rng
                    )
        return group

    sets = {
        "relation": build(rel_mats),
        "subject1": build(subj_mats),
        "subject2": build(subj_mats),
        "ffn": build(FFN_MATRICES),
    }
    return TripletConfig(rank=rank, scale=scale, placement=placement,
                         pattern=tuple(pattern), sets=sets)


def select_active(triplet: TripletConfig, rng: np.random.Generator) -> Selection:
    """Draw this step's active group uniformly from the three choices.

    The FFN set is trainable on every step.  The mask kind follows the
    choice: the relation step supervises under the union mask, a
    subject step under that subject's mask.
    """
    choice = ("relation", "subject1", "subject2")[int(rng.integers(3))]
    if choice == "relation":
        names = ("relation", "subject1", "subject2", "ffn")
        mask_kind = "relation"
    else:
        names = (choice, "ffn")
        mask_kind = choice
    return Selection(choice=choice, trainable=triplet.set_params(names),
                     mask_kind=mask_kind)


def inference_view(triplet: TripletConfig) -> TripletConfig:
    """Triplet with both subject sets dropped; idempotent.

    Adapter objects are shared with the source triplet, not copied.
    """
    sets = {
        "relation": dict(triplet.sets.get("relation", {})),
        "ffn": dict(triplet.sets.get("ffn", {})),
    }
    return TripletConfig(rank=triplet.rank, scale=triplet.scale,
                         placement=triplet.placement,
                         pattern=triplet.pattern, sets=sets)
