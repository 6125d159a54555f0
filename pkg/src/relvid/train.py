"""Adapter training loop, checkpointing, and guided sampling.

Each step draws one video, one noise level, and one active adapter
group (relation / subject1 / subject2, uniform).  The loss is the
mask-weighted denoising error under that group's mask plus a weighted
contrastive term fed by a FIFO feature bank.  Only the selected
adapters and the always-on FFN group receive gradient updates; base
weights stay frozen.  Checkpoints round-trip bitwise through the
shared tensor container.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tz
from . import vocab as vb
from .container import read_container, write_container
from .errors import (ConfigError, DataError, FormatError, NumericAbort,
                     ShapeError)
from .lora import (TripletConfig, inference_view, init_triplet, select_active)
from .masks import masked_loss
from .model import Denoiser, ModelConfig, patchify, unpatchify
from .rcl import (MemoryBank, appearance_features, dynamics_features,
                  frame_differences, rcl_loss, sample_contrast)
from .tensor import Tensor

# fixed pixel standardization for the synthetic corpus (mean ~0.04,
# std ~0.19 across relations); makes the latents roughly zero-mean
# unit-variance so the unit-Gaussian sampling start sits on the same
# scale as the noised training latents
PIXEL_MEAN = 0.04
PIXEL_SCALE = 0.2


def video_to_latent(video, t_c: int, p: int):
    return patchify((np.asarray(video, dtype=np.float64) - PIXEL_MEAN)
                    / PIXEL_SCALE, t_c, p)


def latent_to_video(z, t_c: int, p: int, channels: int):
    video = unpatchify(z, t_c, p, channels) * PIXEL_SCALE + PIXEL_MEAN
    return np.clip(video, 0.0, 1.0)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    iterations: int = 2000
    lambda_m: float = 50.0
    lambda_1: float = 0.01
    tau: float = 0.07
    n_pos: int = 4
    n_neg: int = 10
    bank_capacity: int = 64
    prompt_dropout: float = 0.1
    rank: int = 16
    lora_scale: float = 1.0
    placement: str = "qk_v"
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 <= self.prompt_dropout < 1.0:
            raise ConfigError("prompt_dropout must lie in [0, 1)")
        if self.lambda_m < 0 or self.lambda_1 < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.n_pos < 1 or self.n_neg < 1 or self.bank_capacity < 1:
            raise ConfigError("contrast set sizes must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "TrainConfig":
        return cls(**json.loads(s))


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Moments and step counts are kept per parameter name, so parameters
    that sit out a step keep their state bitwise unchanged.
    """

    def __init__(self, lr: float, weight_decay: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, named_params):
        for name, p in named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            t = self.steps.get(name, 0) + 1
            self.steps[name] = t
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            mh = m / (1.0 - self.beta1 ** t)
            vh = v / (1.0 - self.beta2 ** t)
            p.data -= self.lr * (mh / (np.sqrt(vh) + self.eps)
                                 + self.weight_decay * p.data)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    base_params: dict
    triplet: TripletConfig
    opt_state: dict = field(default_factory=dict)   # name -> {"m","v","t"}
    iteration: int = 0


class Trainer:
    """Owns the model, adapters, bank, and optimizer for one run."""

    def __init__(self, entries, model_cfg: ModelConfig, cfg: TrainConfig,
                 checkpoint: Checkpoint | None = None):
        if not entries:
            raise ConfigError("training needs at least one dataset entry")
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.rng = np.random.default_rng(cfg.seed)
        if checkpoint is not None:
            self.denoiser = Denoiser(model_cfg, checkpoint.base_params)
            self.triplet = checkpoint.triplet
            self.iteration = checkpoint.iteration
        else:
            self.denoiser = Denoiser.init(model_cfg, seed=cfg.seed)
            first = [i for i in entries[0].prompt if i != vb.NULL_ID]
            pattern = tuple(vb.decode(first[:3])) if len(first) >= 3 \
                else ("", "", "")
            self.triplet = init_triplet(
                model_cfg.layers, model_cfg.d_model, model_cfg.d_ff,
                rank=cfg.rank, scale=cfg.lora_scale, seed=cfg.seed,
                placement=cfg.placement, pattern=pattern,
            )
            self.iteration = 0
        self.bank = MemoryBank(cfg.bank_capacity)
        self.opt = AdamW(cfg.lr, cfg.weight_decay)
        if checkpoint is not None and checkpoint.opt_state:
            for name, st in checkpoint.opt_state.items():
                self.opt.m[name] = st["m"].copy()
                self.opt.v[name] = st["v"].copy()
                self.opt.steps[name] = int(st["t"])
        self._lora_params = self.triplet.named_params()
        self._null_prompt = [vb.NULL_ID] * model_cfg.text_len
        self._prep = [self._prepare(e, i) for i, e in enumerate(entries)]

    def _prepare(self, entry, index):
        cfg = self.model_cfg
        video = np.asarray(entry.video, dtype=np.float64)
        want = (cfg.frames, cfg.height, cfg.width, cfg.channels)
        if video.shape != want:
            raise DataError(
                f"entry {entry.uid or '?'}: video {video.shape} does not "
                f"match model geometry {want}"
            )
        z0 = video_to_latent(video, cfg.t_c, cfg.patch)
        latents = {
            kind: entry.masks.latent(kind, cfg.t_c, cfg.patch)
            for kind in ("relation", "subject1", "subject2")
        }
        prompt = vb.pad(entry.prompt, cfg.text_len)
        return {
            "z0": z0,
            "masks": latents,
            "prompt": prompt,
            "relation": entry.relation_id,
            "uid": entry.uid or f"entry_{index:05d}",
        }

    # -- one optimization step --

    def step(self) -> dict:
        cfg = self.cfg
        idx = int(self.rng.integers(len(self._prep)))
        prep = self._prep[idx]
        sel = select_active(self.triplet, self.rng)
        t = int(self.rng.integers(self.model_cfg.timesteps))
        eps = self.rng.standard_normal(self.model_cfg.latent_shape)
        dropped = self.rng.random() < cfg.prompt_dropout
        contrast = None
        if cfg.lambda_1 > 0.0:
            contrast = sample_contrast(
                self.bank, prep["relation"], cfg.n_pos, cfg.n_neg, self.rng,
                exclude_video=prep["uid"],
                n_rows=self.model_cfg.latent_frames - 1,
            )

        for _, p in self._lora_params:
            p.requires_grad = False
        for _, p in sel.trainable:
            p.requires_grad = True

        prompt = self._null_prompt if dropped else prep["prompt"]
        z_t = self.denoiser.schedule.add_noise(prep["z0"], t, eps)
        eps_hat = self.denoiser.forward(z_t, prompt, t, triplet=self.triplet)

        l_rec = masked_loss(Tensor(eps), eps_hat, prep["masks"][sel.mask_kind],
                            cfg.lambda_m)
        if contrast is not None:
            anchors = dynamics_features(frame_differences(eps_hat))
            l_rcl = rcl_loss(anchors, contrast[0], contrast[1], tau=cfg.tau)
            l_total = l_rec + cfg.lambda_1 * l_rcl
            l_rcl_val = l_rcl.item()
        else:
            l_total = l_rec
            l_rcl_val = 0.0

        row = {
            "iter": self.iteration,
            "choice": sel.choice,
            "l_rec": l_rec.item(),
            "l_rcl": l_rcl_val,
            "l_total": l_total.item(),
            "dropped": bool(dropped),   # not written to the CSV
        }
        if not np.isfinite(row["l_total"]):
            raise NumericAbort(
                f"non-finite loss at iteration {self.iteration}",
                dump={**row, "video": prep["uid"], "timestep": t,
                      "prompt_dropped": dropped},
            )

        l_total.backward()
        self.opt.step(sel.trainable)
        for _, p in sel.trainable:
            p.zero_grad()

        # bank feeds future steps; pushes happen after sampling so this
        # step's own features were not candidates above
        out = eps_hat.data
        dyn = (out[1:] - out[:-1]).mean(axis=(1, 2))
        app = out.mean(axis=(1, 2))
        self.bank.push_features(dyn, app, prep["relation"], prep["uid"],
                                timestep=t)

        self.iteration += 1
        return row

    def checkpoint(self) -> Checkpoint:
        opt_state = {}
        for name, _ in self._lora_params:
            if name in self.opt.m:
                opt_state[name] = {
                    "m": self.opt.m[name],
                    "v": self.opt.v[name],
                    "t": self.opt.steps[name],
                }
        return Checkpoint(
            model_config=self.model_cfg,
            train_config=self.cfg,
            base_params=dict(self.denoiser.params),
            triplet=self.triplet,
            opt_state=opt_state,
            iteration=self.iteration,
        )


def train(entries, model_cfg: ModelConfig, cfg: TrainConfig,
          out_path=None, log_every: int = 0):
    """Run the full loop; returns (checkpoint, list of metric rows)."""
    trainer = Trainer(entries, model_cfg, cfg)
    rows = []
    for i in range(cfg.iterations):
        rows.append(trainer.step())
        if log_every and (i + 1) % log_every == 0:
            r = rows[-1]
            print(f"iter {r['iter']:6d}  choice={r['choice']:9s} "
                  f"l_rec={r['l_rec']:.5f}  l_total={r['l_total']:.5f}")
        if (out_path and cfg.checkpoint_every
                and (i + 1) % cfg.checkpoint_every == 0
                and (i + 1) < cfg.iterations):
            save_checkpoint(trainer.checkpoint(), f"{out_path}.iter{i + 1}")
    ck = trainer.checkpoint()
    if out_path:
        save_checkpoint(ck, out_path)
    return ck, rows


def write_metrics_csv(rows, path):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "choice", "l_rec", "l_rcl", "l_total"])
        for r in rows:
            w.writerow([r["iter"], r["choice"], f"{r['l_rec']:.12g}",
                        f"{r['l_rcl']:.12g}", f"{r['l_total']:.12g}"])


# ---- checkpoint container ----


def save_checkpoint(ck: Checkpoint, path):
    tensors = {}
    for name, p in ck.base_params.items():
        tensors[name] = p.data
    for name, p in ck.triplet.named_params():
        tensors[name] = p.data
    for name, st in ck.opt_state.items():
        tensors[f"opt/{name}/m"] = st["m"]
        tensors[f"opt/{name}/v"] = st["v"]
        tensors[f"opt/{name}/t"] = np.float64(st["t"])
    tensors["__iteration__"] = np.float64(ck.iteration)
    config = {
        "model": json.loads(ck.model_config.to_json()),
        "train": json.loads(ck.train_config.to_json()),
        "triplet": {
            "rank": ck.triplet.rank,
            "scale": ck.triplet.scale,
            "placement": ck.triplet.placement,
            "pattern": list(ck.triplet.pattern),
        },
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    write_container(path, tensors, blobs={"__config__": blob})


def load_checkpoint(path, model_config: ModelConfig | None = None) -> Checkpoint:
    tensors, blobs = read_container(path)
    if "__config__" not in blobs:
        raise FormatError(f"{path}: checkpoint has no __config__ entry")
    config = json.loads(blobs["__config__"].decode("utf-8"))
    stored_cfg = ModelConfig(**config["model"])
    train_cfg = TrainConfig(**config["train"])
    if model_config is not None and model_config != stored_cfg:
        _explain_mismatch(model_config, tensors, path)
        raise ConfigError(
            f"{path}: stored model config differs from the requested one"
        )
    cfg = stored_cfg

    base = {}
    for name, arr in tensors.items():
        if name.startswith("base/"):
            base[name] = Tensor(arr)
    probe = Denoiser.init(cfg, seed=0)
    for name, p in probe.named_params():
        if name not in base:
            raise FormatError(f"{path}: checkpoint is missing tensor {name}")
        if base[name].shape != p.shape:
            raise ShapeError(
                f"{path}: tensor {name} has shape {base[name].shape}, "
                f"expected {p.shape}"
            )

    tri_meta = config["triplet"]
    triplet = init_triplet(
        cfg.layers, cfg.d_model, cfg.d_ff, rank=tri_meta["rank"],
        scale=tri_meta["scale"], seed=0, placement=tri_meta["placement"],
        pattern=tuple(tri_meta.get("pattern", ("", "", ""))),
    )
    for name, p in triplet.named_params():
        if name not in tensors:
            raise FormatError(f"{path}: checkpoint is missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise ShapeError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data = tensors[name].copy()
        p.requires_grad = False

    opt_state = {}
    for name, _ in triplet.named_params():
        key = f"opt/{name}/m"
        if key in tensors:
            opt_state[name] = {
                "m": tensors[f"opt/{name}/m"].copy(),
                "v": tensors[f"opt/{name}/v"].copy(),
                "t": int(np.asarray(tensors[f"opt/{name}/t"]).flat[0]),
            }
    iteration = int(np.asarray(tensors.get("__iteration__", 0.0)).flat[0])
    return Checkpoint(
        model_config=cfg, train_config=train_cfg, base_params=base,
        triplet=triplet, opt_state=opt_state, iteration=iteration,
    )


def _explain_mismatch(expected_cfg: ModelConfig, tensors, path):
    """Raise a shape error naming the first offending tensor, if any."""
    probe = Denoiser.init(expected_cfg, seed=0)
    for name, p in probe.named_params():
        if name in tensors and tensors[name].shape != p.shape:
            raise ShapeError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"expected {p.shape} for the requested model config"
            )


# ---- sampling ----


def timestep_sequence(timesteps: int, steps: int) -> np.ndarray:
    """Descending, deterministic subset of the training timesteps."""
    if steps < 1:
        raise ConfigError(f"sampling needs >= 1 step, got {steps}")
    steps = min(steps, timesteps)
    ts = np.unique(np.round(np.linspace(0, timesteps - 1, steps)).astype(int))
    return ts[::-1]


def sample(ck: Checkpoint, prompt_ids, steps: int = 32,
           cfg_scale: float = 6.0, seed: int = 0,
           exclude_subjects: bool = True) -> np.ndarray:
    """Deterministic DDIM sampling with classifier-free guidance.

    Subject adapters are excluded by default; cfg_scale 0 follows the
    unconditional branch exactly and 1 the conditional branch exactly.
    Returns a video in [0, 1] of the model's native geometry.
    """
    cfg = ck.model_config
    den = Denoiser(cfg, ck.base_params)
    triplet = inference_view(ck.triplet) if exclude_subjects else ck.triplet
    null_prompt = [vb.NULL_ID] * cfg.text_len
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(cfg.latent_shape)
    ts = timestep_sequence(cfg.timesteps, steps)
    abars = den.schedule.alpha_bars
    with tz.no_grad():
        for i, t in enumerate(ts):
            if cfg_scale == 0.0:
                eps_g = den.forward(z, null_prompt, t, triplet).data
            elif cfg_scale == 1.0:
                eps_g = den.forward(z, prompt_ids, t, triplet).data
            else:
                eps_c = den.forward(z, prompt_ids, t, triplet).data
                eps_u = den.forward(z, null_prompt, t, triplet).data
                eps_g = eps_u + cfg_scale * (eps_c - eps_u)
            ab_t = abars[t]
            z0_hat = (z - np.sqrt(1.0 - ab_t) * eps_g) / np.sqrt(ab_t)
            ab_next = abars[ts[i + 1]] if i + 1 < len(ts) else 1.0
            z = np.sqrt(ab_next) * z0_hat + np.sqrt(1.0 - ab_next) * eps_g
    return latent_to_video(z, cfg.t_c, cfg.patch, cfg.channels)
