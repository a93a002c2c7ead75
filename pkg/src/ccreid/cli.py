"""Command line interface: dataset generation, training, retrieval
evaluation, activation-map visualization, and weight sweeps.

Configuration is layered: built-in defaults, then a named preset, then an
INI config file, then individual --set section.key=value overrides. The
fully resolved configuration is echoed into the run directory so every run
is reproducible from its artifacts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
aborted.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from dataclasses import asdict

import numpy as np
import torch

from .datamodel import DatasetIndex, load_image, load_index
from .errors import (ConfigurationError, IndexParseError, TrainingAborted,
                     ValidationError)
from .evalproto import evaluate, save_embeddings, write_results
from .losses import LossConfig
from .network import load_checkpoint
from .preprocess import AugmentConfig, resize_sample
from .synthdata import SynthConfig, generate
from .train import TrainConfig, train

RUN_ROOT_ENV = "CCREID_RUN_ROOT"
RESOLVED_CONFIG = "config_resolved.ini"

_MODEL_DEFAULTS = {
    "stage_channels": [16, 32, 64, 128],
    "last_stage_stride": 1,
    "input_height": 384,
    "input_width": 192,
    "blocks_per_stage": 1,
    "classifier_kind": "conv_gap",
    "num_parts": 4,
    "streams": ["r", "h", "b"],
}

_AUGMENT_DEFAULTS = {
    "flip_probability": 0.5,
    "crop_padding": 10,
    "erase_probability": 0.5,
    "erase_area_range": [0.02, 0.2],
    "erase_aspect_range": [0.3, 3.3],
}


def _section_defaults():
    train = asdict(TrainConfig())
    train["decay_epochs"] = list(train["decay_epochs"])
    loss = asdict(LossConfig())
    loss.pop("streams")  # mirrors the model streams, configured once
    return {
        "model": dict(_MODEL_DEFAULTS),
        "train": train,
        "loss": loss,
        "augment": dict(_AUGMENT_DEFAULTS),
    }


# Per-dataset weight and input-size presets; toy is sized for quick runs on
# the synthetic data.
PRESETS = {
    "ltcc": {},
    "prcc": {("loss", "part_weight"): 0.1, ("loss", "consistency_weight"): 0.1},
    "vcclothes": {},
    "deepchange": {},
    "toy": {
        ("model", "input_height"): 128,
        ("model", "input_width"): 64,
        ("train", "epochs"): 30,
        ("train", "warmup_epochs"): 2,
        ("train", "base_lr"): 3e-3,
        ("train", "decay_epochs"): [],
        ("train", "checkpoint_every"): 10,
        ("loss", "part_weight"): 2.0,
        ("loss", "consistency_weight"): 0.5,
        ("loss", "consistency_pixel_mean"): True,
        ("augment", "erase_probability"): 0.0,
        ("augment", "crop_padding"): 4,
    },
}


def _coerce(text, default):
    """Parse a config string into the type of its default value."""
    if isinstance(default, bool):
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (list, tuple)):
        parts = [p for p in text.replace(",", " ").split() if p]
        elem = default[0] if len(default) else 0
        return [_coerce(p, elem) for p in parts]
    return text.strip()


def resolve_config(preset=None, config_path=None, overrides=()):
    """Layer preset, config file, and overrides onto the defaults."""
    cfg = _section_defaults()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for (section, key), value in PRESETS[preset].items():
            cfg[section][key] = value
    if config_path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(config_path):
            raise ConfigurationError(f"cannot read config file {config_path}")
        for section in parser.sections():
            if section not in cfg:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigurationError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(raw, cfg[section][key])
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(
                f"override {item!r} must look like section.key=value")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        cfg[section][key] = _coerce(raw, cfg[section][key])
    return cfg


def build_objects(cfg):
    """Turn a resolved config dict into the typed config objects."""
    model_cfg = dict(cfg["model"])
    model_cfg["streams"] = tuple(model_cfg["streams"])
    train_kwargs = dict(cfg["train"])
    train_kwargs["decay_epochs"] = tuple(train_kwargs["decay_epochs"])
    train_cfg = TrainConfig(**train_kwargs).validate()
    loss_cfg = LossConfig(streams=model_cfg["streams"], **cfg["loss"]).validate()
    aug = dict(cfg["augment"])
    aug_cfg = AugmentConfig(
        target_height=model_cfg["input_height"],
        target_width=model_cfg["input_width"],
        flip_probability=aug["flip_probability"],
        crop_padding=aug["crop_padding"],
        erase_probability=aug["erase_probability"],
        erase_area_range=tuple(aug["erase_area_range"]),
        erase_aspect_range=tuple(aug["erase_aspect_range"]),
    ).validate()
    model_cfg["consistency_needed"] = loss_cfg.consistency_active
    return model_cfg, train_cfg, loss_cfg, aug_cfg


def write_resolved_config(cfg, path):
    parser = configparser.ConfigParser()
    for section, values in cfg.items():
        parser[section] = {}
        for key, value in values.items():
            if isinstance(value, (list, tuple)):
                parser[section][key] = ",".join(str(v) for v in value)
            else:
                parser[section][key] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


def _run_dir(args):
    if args.run_dir:
        return args.run_dir
    root = os.environ.get(RUN_ROOT_ENV, "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    name = args.preset or "run"
    return os.path.join(root, f"{name}-{stamp}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args):
    cfg = SynthConfig(
        num_identities=args.ids,
        outfits_per_identity=args.outfits,
        images_per_outfit=args.images,
        num_cameras=args.cameras,
        image_height=args.height,
        image_width=args.width,
        seed=args.seed,
    )
    index = generate(cfg, args.out)
    counts = {}
    for e in index.entries:
        counts[e.split] = counts.get(e.split, 0) + 1
    parts = ", ".join(f"{split}={n}" for split, n in sorted(counts.items()))
    print(f"wrote {len(index.entries)} samples to {args.out} ({parts})")
    return 0


def cmd_train(args):
    index = load_index(args.data)
    cfg = resolve_config(args.preset, args.config, args.set or ())
    model_cfg, train_cfg, loss_cfg, aug_cfg = build_objects(cfg)
    run_dir = _run_dir(args)
    os.makedirs(run_dir, exist_ok=True)
    write_resolved_config(cfg, os.path.join(run_dir, RESOLVED_CONFIG))
    result = train(index, train_cfg, loss_cfg, aug_cfg, run_dir,
                   model_cfg=None if args.resume else model_cfg,
                   resume=args.resume)
    last = result.history[-1][3] if result.history else None
    if last is not None:
        print(f"final step loss {last.total:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args):
    index = load_index(args.data)
    model, meta, _ = load_checkpoint(args.checkpoint)
    results, query, gallery = evaluate(index, model, metric=args.metric,
                                       batch_size=args.batch_size)
    for res in results.values():
        print(res.summary())
    if args.out:
        write_results(results, args.out)
        print(f"results written to {args.out}")
    if args.save_embeddings:
        save_embeddings(args.save_embeddings, query, gallery)
        print(f"embeddings written to {args.save_embeddings}")
    return 0


def _normalize_map(cam):
    """Min-max normalize to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def cmd_viz_cam(args):
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import colormaps
    from PIL import Image

    index = load_index(args.data)
    model, meta, _ = load_checkpoint(args.checkpoint)
    if model.classifier_kind != "conv_gap":
        raise ConfigurationError(
            "this checkpoint's classifier produces no activation maps")
    pid_map = {int(k): v for k, v in meta.get("pid_map", {}).items()}
    entries = sorted(index.split_entries(args.split), key=lambda e: e.image_path)
    if not entries:
        raise ValidationError(f"dataset has no {args.split!r} entries")
    entries = entries[:args.num]
    os.makedirs(args.out, exist_ok=True)
    cmap = colormaps["jet"]
    cfg = model.backbone.cfg
    model.eval()
    for entry in entries:
        img = load_image(index, entry)
        img, _ = resize_sample(img, None, cfg.input_height, cfg.input_width)
        batch = torch.from_numpy(img.transpose(2, 0, 1)[None].astype(np.float32))
        with torch.no_grad():
            feats = model.backbone(batch)
            logits, cam = model.classifiers["r"](feats)
        cls = pid_map.get(entry.person_id)
        if cls is None:
            cls = int(logits[0].argmax())  # unseen identity: show the prediction
        heat = _normalize_map(cam[0, cls].numpy())
        import cv2
        heat = cv2.resize(heat, (cfg.input_width, cfg.input_height),
                          interpolation=cv2.INTER_LINEAR)
        colored = cmap(heat)[..., :3]
        overlay = 0.5 * img + 0.5 * colored
        composite = np.concatenate([img, overlay, colored], axis=1)
        out = Image.fromarray((np.clip(composite, 0, 1) * 255).astype(np.uint8))
        stem = os.path.splitext(os.path.basename(entry.image_path))[0]
        out.save(os.path.join(args.out, f"cam_{stem}.png"))
    print(f"wrote {len(entries)} activation-map panels to {args.out}")
    return 0


def _read_result_rows(path):
    rows = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            fields = dict(zip(header, line.rstrip("\n").split("\t")))
            rows[fields["setting"]] = tuple(
                float(fields[k]) for k in ("rank1", "rank5", "rank10", "mAP"))
    return rows


def cmd_sweep(args):
    index = load_index(args.data)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    os.makedirs(args.run_dir, exist_ok=True)
    rows = []
    for value in values:
        sub_dir = os.path.join(args.run_dir, f"{args.param.split('.')[-1]}={value}")
        row_path = os.path.join(sub_dir, "results.tsv")
        if os.path.exists(row_path):
            # interrupted sweeps restart cheaply: a finished grid point is
            # read back from its results file instead of retrained
            print(f"[sweep] {args.param}={value} (cached)")
            rows.append((value, _read_result_rows(row_path)))
            continue
        overrides = list(args.set or ()) + [f"{args.param}={value}"]
        cfg = resolve_config(args.preset, args.config, overrides)
        model_cfg, train_cfg, loss_cfg, aug_cfg = build_objects(cfg)
        os.makedirs(sub_dir, exist_ok=True)
        write_resolved_config(cfg, os.path.join(sub_dir, RESOLVED_CONFIG))
        print(f"[sweep] {args.param}={value}")
        result = train(index, train_cfg, loss_cfg, aug_cfg, sub_dir,
                       model_cfg=model_cfg)
        results, _, _ = evaluate(index, result.model, metric=args.metric)
        write_results(results, row_path)
        for res in results.values():
            print("  " + res.summary())
        rows.append((value, {s: (r.rank[1], r.rank[5], r.rank[10], r.mean_ap)
                             for s, r in results.items()}))
    summary_path = os.path.join(args.run_dir, "sweep_results.tsv")
    with open(summary_path, "w") as fh:
        fh.write("value\tsetting\trank1\trank5\trank10\tmAP\n")
        for value, results in rows:
            for setting, vals in results.items():
                fh.write(f"{value}\t{setting}\t" + "\t".join(f"{v:.6f}" for v in vals) + "\n")
    print(f"sweep summary written to {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ccreid",
        description="cloth-changing person re-identification workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--outfits", type=int, default=3)
    p.add_argument("--images", type=int, default=4, help="images per outfit")
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    def common_cfg(p):
        p.add_argument("--preset", choices=sorted(PRESETS), default=None)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a single config value")

    p = sub.add_parser("train", help="train a model on a dataset index")
    p.add_argument("--data", required=True, help="path to index.tsv")
    p.add_argument("--run-dir", default=None,
                   help=f"artifact directory (default: ${RUN_ROOT_ENV}/<name>-<stamp>)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    common_cfg(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery splits")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", default=None, help="write a TSV results file")
    p.add_argument("--save-embeddings", default=None, help="write embeddings npz")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-cam", help="render activation-map overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output image directory")
    p.add_argument("--split", default="query")
    p.add_argument("--num", type=int, default=8)
    p.set_defaults(func=cmd_viz_cam)

    p = sub.add_parser("sweep", help="train and evaluate across one config value")
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--param", required=True, metavar="SECTION.KEY")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    common_cfg(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def entrypoint(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (IndexParseError, ValidationError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except TrainingAborted as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 4


def main():
    sys.exit(entrypoint())


if __name__ == "__main__":
    main()
