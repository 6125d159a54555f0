"""Command line tying generation, training, sampling, analysis, and
evaluation into reproducible seeded runs.

A run is configured by an optional JSON file with ``model``, ``train``,
and ``data`` sections plus dotted flag overrides (``--train.lr 1e-4``);
unknown sections or keys are rejected.  The environment variable
``RLT_SEED`` supplies a global seed when no flag or config sets one.

Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numeric abort.
Report commands write a PNG figure next to each CSV (``--no-plot``
skips the figure; the CSV is the canonical output either way).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import analysis, report
from . import datagen as dg
from . import tensor as tz
from . import vocab as vb
from .container import read_container, write_container
from .errors import ConfigError, DataError, NumericAbort
from .lora import inference_view
from .model import Denoiser, ModelConfig
from .train import (TrainConfig, load_checkpoint, sample, train,
                    write_metrics_csv)


@dataclass
class DataConfig:
    """Defaults for one generated dataset; mirrors the generator knobs."""

    relation: str = "approach"
    count: int = 16
    frames: int = 8
    height: int = 32
    width: int = 32
    shapes: tuple = ("circle", "square")
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shapes, str):
            self.shapes = tuple(
                s.strip() for s in self.shapes.split(",") if s.strip()
            )
        self.shapes = tuple(self.shapes)
        if self.relation not in dg.RELATIONS:
            raise ConfigError(
                f"unknown relation {self.relation!r}; expected one of "
                f"{', '.join(dg.RELATIONS)}"
            )
        if not self.shapes:
            raise ConfigError("data.shapes must name at least one shape")
        for s in self.shapes:
            if s not in dg.SHAPES:
                raise ConfigError(
                    f"unknown shape {s!r}; expected one of "
                    f"{', '.join(dg.SHAPES)}"
                )
        if self.count < 0:
            raise ConfigError("data.count must be >= 0")


_SECTION_FIELDS = {
    "model": {f.name for f in dc_fields(ModelConfig)},
    "train": {f.name for f in dc_fields(TrainConfig)},
    "data": {f.name for f in dc_fields(DataConfig)},
}


# ---- config plumbing ----


def _load_config(path):
    sections = {"model": {}, "train": {}, "data": {}}
    if path is None:
        return sections
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for sec, body in raw.items():
        if sec not in _SECTION_FIELDS:
            raise ConfigError(f"{path}: unknown config section {sec!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section {sec!r} must be an object")
        for key in body:
            if key not in _SECTION_FIELDS[sec]:
                raise ConfigError(f"{path}: unknown config key {sec}.{key}")
        sections[sec].update(body)
    return sections


def _parse_overrides(extras):
    """Turn leftover ``--section.key value`` flags into nested dicts."""
    out = {"model": {}, "train": {}, "data": {}}
    it = iter(extras)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"override {tok!r} is missing a value")
        sec, _, name = key.partition(".")
        if sec not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section {sec!r} in {tok!r}")
        if name not in _SECTION_FIELDS[sec]:
            raise ConfigError(f"unknown config key {sec}.{name}")
        try:
            out[sec][name] = json.loads(raw)
        except json.JSONDecodeError:
            out[sec][name] = raw
    return out


def _merge(sections, overrides):
    for sec, body in overrides.items():
        sections[sec].update(body)
    return sections


def _env_seed(default):
    raw = os.environ.get("RLT_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"RLT_SEED must be an integer, got {raw!r}")


def _seed_into(section, flag_value):
    """flag > config value > RLT_SEED > dataclass default."""
    if flag_value is not None:
        section["seed"] = flag_value
    elif "seed" not in section and os.environ.get("RLT_SEED") is not None:
        section["seed"] = _env_seed(0)


def _fig_path(path):
    return os.path.splitext(path)[0] + ".png"


def _parse_size(s):
    parts = s.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigError(f"bad --size {s!r}; use H or HxW, e.g. 32x32")
    return h, w


# ---- subcommands ----


def cmd_datagen(args, overrides):
    sections = _merge(_load_config(args.config), overrides)
    d = sections["data"]
    if args.relation:
        d["relation"] = args.relation
    if args.count is not None:
        d["count"] = args.count
    if args.frames is not None:
        d["frames"] = args.frames
    if args.size:
        d["height"], d["width"] = _parse_size(args.size)
    if args.shapes:
        d["shapes"] = args.shapes
    _seed_into(d, args.seed)
    dcfg = DataConfig(**d)

    rng = np.random.default_rng(dcfg.seed)
    entries = []
    for _ in range(dcfg.count):
        s1 = dcfg.shapes[int(rng.integers(len(dcfg.shapes)))]
        s2 = dcfg.shapes[int(rng.integers(len(dcfg.shapes)))]
        spec = dg.RelationSpec(relation=dcfg.relation, shape1=s1, shape2=s2,
                               seed=int(rng.integers(2 ** 31 - 1)))
        entries.append(dg.gen_video(spec, frames=dcfg.frames,
                                    height=dcfg.height, width=dcfg.width))
    dg.write_dataset(entries, args.out)
    print(f"wrote {len(entries)} {dcfg.relation} entries to {args.out}")


def cmd_train(args, overrides):
    sections = _merge(_load_config(args.config), overrides)
    tsec = sections["train"]
    if args.iters is not None:
        tsec["iterations"] = args.iters
    _seed_into(tsec, args.seed)
    model_cfg = ModelConfig(**sections["model"])
    train_cfg = TrainConfig(**tsec)

    entries = dg.read_dataset(args.data)
    ck, rows = train(entries, model_cfg, train_cfg, out_path=args.out,
                     log_every=args.log_every)
    metrics_path = args.metrics or args.out + ".metrics.csv"
    write_metrics_csv(rows, metrics_path)
    if rows and not args.no_plot:
        report.loss_curves(rows, _fig_path(metrics_path))
    print(f"checkpoint {args.out} ({ck.iteration} iterations)")
    if rows:
        last = rows[-1]
        print(f"final l_rec={last['l_rec']:.5f} l_total={last['l_total']:.5f}")


def cmd_infer(args, overrides):
    ck = load_checkpoint(args.ckpt)
    ids = vb.encode(args.prompt)
    seed = args.seed if args.seed is not None else _env_seed(0)
    video = sample(ck, ids, steps=args.steps, cfg_scale=args.cfg_scale,
                   seed=seed, exclude_subjects=not args.include_subjects)
    meta = {
        "prompt": ids,
        "steps": args.steps,
        "cfg_scale": args.cfg_scale,
        "seed": seed,
        "subjects_excluded": not args.include_subjects,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    write_container(args.out, {"video": video}, blobs={"__meta__": blob})
    if not args.no_plot:
        report.video_strip(video, _fig_path(args.out), title=args.prompt)
    print(f"wrote {args.out}")


def _analysis_timestep(cfg: ModelConfig, flag):
    if flag is not None:
        return flag
    # mid-to-late denoising step, scaled to this schedule's length
    return min(cfg.timesteps - 1, int(round(60.0 / 64.0 * cfg.timesteps)))


def _prompt_words(ck, flag):
    if flag:
        return flag.split()
    pattern = [w for w in ck.triplet.pattern if w]
    if len(pattern) == 3:
        return list(pattern)
    raise ConfigError(
        "checkpoint records no prompt pattern; pass --prompt 's1 rel s2'"
    )


def _recorded_forward(ck, prompt_words, timestep, seed):
    cfg = ck.model_config
    den = Denoiser(cfg, ck.base_params)
    view = inference_view(ck.triplet)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(cfg.latent_shape)
    ids = vb.encode(prompt_words)
    with tz.no_grad():
        _, rec = den.forward(z, ids, timestep, view, record=True)
    return rec


def cmd_analyze(args, overrides):
    ck = load_checkpoint(args.ckpt)
    seed = args.seed if args.seed is not None else _env_seed(0)
    if args.what == "subspace":
        grids = analysis.qkv_similarity_report(ck, rank=args.rank)
        analysis.write_similarity_csv(analysis.similarity_rows(grids),
                                      args.out)
        if not args.no_plot:
            report.similarity_heatmaps(grids, _fig_path(args.out))
        print(f"wrote {args.out}")
        return

    t = _analysis_timestep(ck.model_config, args.timestep)
    words = _prompt_words(ck, args.prompt)
    rec = _recorded_forward(ck, words, t, seed)
    if args.what == "featmap":
        m = analysis.feature_map(rec, args.which)
        title = f"{args.which.upper()} features, t={t}"
    else:
        if not args.token:
            raise ConfigError("attnmap needs --token WORD")
        token_id = vb.encode([args.token])[0]
        m = analysis.attention_map(rec, token_id)
        title = f"attention for {args.token!r}, t={t}"
    analysis.write_map_csv(m, args.out)
    if not args.no_plot:
        report.map_figure(m, _fig_path(args.out), title=title)
    print(f"wrote {args.out}")


def _load_videos(root):
    if not os.path.isdir(root):
        raise DataError(f"video directory {root} does not exist")
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            if not fn.endswith(".ntv") or fn == "masks.ntv":
                continue
            tensors, _ = read_container(os.path.join(dirpath, fn))
            if "video" in tensors:
                out.append(tensors["video"])
    return out


def cmd_eval(args, overrides):
    videos = _load_videos(args.videos)
    if not videos:
        raise ConfigError(f"no video containers found under {args.videos}")
    if args.metric == "relation-accuracy":
        if not args.expected:
            raise ConfigError("relation-accuracy needs --expected NAME")
        value = dg.relation_accuracy(videos, args.expected)
    else:
        value = float(np.mean([dg.temporal_consistency(v) for v in videos]))
    print(f"{value:.6f}")


# ---- parser ----


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="relvid",
        description="relational video customization toolkit",
    )
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--relation", choices=dg.RELATIONS)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", help="canvas size, H or HxW")
    p.add_argument("--shapes", help="comma-separated shape pool")
    p.add_argument("--config", help="JSON run config")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train adapters on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", help="metrics CSV path (default OUT.metrics.csv)")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sample a video from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True, help='e.g. "circle approach square"')
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--cfg-scale", type=float, default=6.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output video container")
    p.add_argument("--include-subjects", action="store_true",
                   help="keep subject adapters active (debugging)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="weight and activation reports")
    p.add_argument("what", choices=("subspace", "attnmap", "featmap"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--rank", type=int, default=16,
                   help="subspace rank r (subspace mode)")
    p.add_argument("--prompt", help="prompt for recorded forwards")
    p.add_argument("--token", help="prompt word to map (attnmap mode)")
    p.add_argument("--which", choices=("q", "k", "v"), default="q",
                   help="feature kind (featmap mode)")
    p.add_argument("--timestep", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="score sampled videos")
    p.add_argument("--videos", required=True, help="directory of .ntv videos")
    p.add_argument("--metric", required=True,
                   choices=("relation-accuracy", "temporal-consistency"))
    p.add_argument("--expected", choices=dg.RELATIONS)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        if args.cmd in ("train", "datagen"):
            overrides = _parse_overrides(extras)
        elif extras:
            raise ConfigError(f"unrecognized arguments: {' '.join(extras)}")
        else:
            overrides = {}
        args.func(args, overrides)
        return 0
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump, sort_keys=True), file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
