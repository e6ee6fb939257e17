"""Command-line entry point: train, infer, eval, bench, synth.

Config precedence is built-in defaults < config file < flags; the effective
config is echoed into every output artifact. Exit codes: 0 success, 2 config
or usage error, 3 data error, 4 numeric divergence.
"""

import argparse
import hashlib
import math
import os
import sys

import numpy as np

from .checkpoint import (CheckpointError, pack_state, save_checkpoint,
                         restore_model, restore_optimizer)
from .data import (DataError, load_manifest_pairs, synth_split, synth_scene,
                   DatasetSplit)
from .imageio import (ImageFormatError, atomic_write, load_pgm16, load_ppm,
                      save_pfm, save_pgm16, save_ppm)
from .model import DmsrModel, ModelConfig, identity_field, apply_joint_filter, upsample_lr
from .tensor import ShapeError, Tensor
from .train import (Adam, TrainingDivergedError, bench, evaluate, psnr,
                    train_epochs)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

# every key maps to exactly one model/data/train field
DEFAULTS = {
    "model.backbone": "swin",
    "model.num_blocks": 0,
    "model.embed_dim": 32,
    "model.window": 4,
    "model.heads": 2,
    "model.layers_per_block": 2,
    "model.mlp_ratio": 2.0,
    "model.k": 3,
    "model.scale": 8,
    "model.resample_factor": 4,
    "model.position_bias": False,
    "data.noise_sigma": 0.0,
    "data.synth_height": 64,
    "data.synth_width": 64,
    "train.epochs": 20,
    "train.seed": 0,
    "train.lr": 0.001,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
}


class ConfigError(ValueError):
    pass


def parse_config_file(path):
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _coerce(key, value):
    kind = type(DEFAULTS[key])
    try:
        if kind is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {value!r} as {kind.__name__}")


def effective_config(args):
    """defaults < config file < command-line flags."""
    flat = dict(DEFAULTS)
    if getattr(args, "config", None):
        flat.update(parse_config_file(args.config))
    flag_map = {
        "backbone": "model.backbone",
        "blocks": "model.num_blocks",
        "embed_dim": "model.embed_dim",
        "window": "model.window",
        "heads": "model.heads",
        "k": "model.k",
        "scale": "model.scale",
        "noise_sigma": "data.noise_sigma",
        "height": "data.synth_height",
        "width": "data.synth_width",
        "epochs": "train.epochs",
        "seed": "train.seed",
        "lr": "train.lr",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            flat[key] = value
    return flat


def model_config(flat):
    try:
        return ModelConfig(
            backbone=flat["model.backbone"],
            num_blocks=flat["model.num_blocks"],
            embed_dim=flat["model.embed_dim"],
            window=flat["model.window"],
            heads=flat["model.heads"],
            layers_per_block=flat["model.layers_per_block"],
            mlp_ratio=flat["model.mlp_ratio"],
            k=flat["model.k"],
            scale=flat["model.scale"],
            resample_factor=flat["model.resample_factor"],
            position_bias=flat["model.position_bias"],
        )
    except ValueError as e:
        raise ConfigError(str(e))


def config_comment_lines(flat):
    return [f"# {k} = {flat[k]!r}" if isinstance(flat[k], float)
            else f"# {k} = {flat[k]}" for k in sorted(flat)]


def _write_csv(path, header, rows, flat):
    lines = config_comment_lines(flat) + [header]
    lines += [",".join(_csv_cell(c) for c in row) for row in rows]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def _csv_cell(c):
    if isinstance(c, float):
        return "inf" if math.isinf(c) else repr(c)
    return str(c)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    flat = effective_config(args)
    cfg = model_config(flat)
    seed = flat["train.seed"]
    os.makedirs(args.out, exist_ok=True)

    if args.synthetic:
        n_train = args.synthetic
        n_eval = max(1, round(n_train * 449 / 1000))  # published split ratio
        split = synth_split(n_train, n_eval, flat["data.synth_height"],
                            flat["data.synth_width"], cfg.scale,
                            flat["data.noise_sigma"], seed)
    elif args.data:
        train_pairs = load_manifest_pairs(args.data, cfg.scale,
                                          flat["data.noise_sigma"], seed)
        eval_pairs = (load_manifest_pairs(args.eval_data, cfg.scale,
                                          flat["data.noise_sigma"], seed)
                      if args.eval_data else [])
        split = DatasetSplit(train_pairs, eval_pairs, seed)
    else:
        raise ConfigError("train needs --synthetic N or --data MANIFEST")

    if args.resume:
        model, arrays, metadata = restore_model(args.resume)
        optimizer = restore_optimizer(model, arrays, metadata)
        start_epoch = int(metadata.get("train.epoch", "-1")) + 1
    else:
        model = DmsrModel(cfg, seed=seed)
        optimizer = Adam(model.named_parameters(), lr=flat["train.lr"],
                         beta1=flat["train.beta1"], beta2=flat["train.beta2"],
                         eps=flat["train.eps"])
        start_epoch = 0

    # divisibility must fail before step 0, not mid-epoch
    for pair in list(split.train) + list(split.eval):
        H, W = pair.guidance.shape[1], pair.guidance.shape[2]
        try:
            model.check_extents(H, W, pair.depth_lr.shape[1], pair.depth_lr.shape[2])
        except ShapeError as e:
            raise DataError(f"pair {pair.pair_id}: {e}")

    base_meta = {
        "train.seed": seed,
        "data.noise_sigma": repr(float(flat["data.noise_sigma"])),
        "data.source": "synthetic" if args.synthetic else args.data,
        "data.n_train": len(split.train),
        "data.n_eval": len(split.eval),
    }
    if args.data:
        digest = hashlib.sha256(open(args.data, "rb").read()).hexdigest()
        base_meta["data.manifest_sha256"] = digest

    def on_epoch(epoch, model_, opt_, psnr_db, ms):
        arrays, meta = pack_state(model_, opt_, dict(base_meta, **{"train.epoch": epoch}))
        save_checkpoint(os.path.join(args.out, f"checkpoint_epoch{epoch:03d}.dmsr"),
                        arrays, meta)

    log = train_epochs(model, optimizer, split, flat["train.epochs"], seed,
                       start_epoch=start_epoch, on_epoch=on_epoch)

    arrays, meta = pack_state(model, optimizer,
                              dict(base_meta, **{"train.epoch": flat["train.epochs"] - 1}))
    final = os.path.join(args.out, "checkpoint.dmsr")
    save_checkpoint(final, arrays, meta)
    _write_csv(os.path.join(args.out, "steps.csv"), "step,loss",
               log.step_losses, flat)
    _write_csv(os.path.join(args.out, "epochs.csv"), "epoch,psnr_db,ms_per_image",
               log.epoch_metrics, flat)
    print(f"checkpoint={final}")
    return 0


def cmd_infer(args):
    model, _, metadata = restore_model(args.checkpoint)
    guidance = load_ppm(args.guidance)
    depth_lr = load_pgm16(args.depth_lr)
    H, W = guidance.shape[1], guidance.shape[2]
    lr_h, lr_w = depth_lr.shape[1], depth_lr.shape[2]
    try:
        model.check_extents(H, W, lr_h, lr_w)
    except ShapeError as e:
        raise DataError(f"{e} (guidance {H}x{W}, depth_lr {lr_h}x{lr_w})")

    g, d = Tensor(guidance[None]), Tensor(depth_lr[None])
    if args.identity_head:
        target_up = upsample_lr(d, model.cfg.scale)
        pred = apply_joint_filter(target_up, identity_field(1, H, W, model.cfg.k),
                                  model.cfg.k)
    else:
        pred = model.forward(g, d)
    sr = pred.data[0]
    save_pfm(args.out, sr)
    if args.out_preview:
        save_pgm16(args.out_preview, sr)
    if args.gt:
        gt = load_pgm16(args.gt)
        print(f"psnr_db={_csv_cell(psnr(sr, gt))}")
    print(f"out={args.out}")
    return 0


def cmd_eval(args):
    flat = effective_config(args)
    model, _, metadata = restore_model(args.checkpoint)
    pairs = load_manifest_pairs(args.manifest, model.cfg.scale,
                                flat["data.noise_sigma"], flat["train.seed"])
    per_pair, mean, ms = evaluate(model, pairs)
    if args.csv:
        _write_csv(args.csv, "pair_id,psnr_db", per_pair, flat)
    for pid, score in per_pair:
        print(f"{pid},{_csv_cell(score)}")
    print(f"mean_psnr_db={_csv_cell(mean)}")
    print(f"ms_per_image={ms:.3f}")
    return 0


def cmd_bench(args):
    flat = effective_config(args)
    if args.checkpoint:
        model, _, _ = restore_model(args.checkpoint)
    else:
        model = DmsrModel(model_config(flat), seed=flat["train.seed"])
    cfg = model.cfg
    div = math.lcm(cfg.scale, cfg.resample_factor * (cfg.window if
                   cfg.backbone == "swin" else 1))
    if args.width % div or args.height % div:
        raise ConfigError(f"bench extents must be divisible by {div}")
    samples, stats = bench(model, args.height, args.width, args.repeats,
                           seed=flat["train.seed"])
    print(f"backbone={cfg.backbone} B={cfg.num_blocks} k={cfg.k} scale={cfg.scale} "
          f"size={args.width}x{args.height}")
    print(f"host={stats['host']}")
    print(f"min_ms={stats['min_ms']:.3f} median_ms={stats['median_ms']:.3f} "
          f"mean_ms={stats['mean_ms']:.3f} repeats={len(samples)}")
    if args.csv:
        _write_csv(args.csv, "repeat,ms",
                   [(i, s) for i, s in enumerate(samples)], flat)
    return 0


def cmd_synth(args):
    flat = effective_config(args)
    os.makedirs(args.out, exist_ok=True)
    seed = flat["train.seed"]
    children = np.random.SeedSequence(seed).spawn(args.count)
    lines = ["# pair_id guidance_path depth_path"]
    for i in range(args.count):
        pid = f"scene{i:03d}"
        pair = synth_scene(children[i], flat["data.synth_height"],
                           flat["data.synth_width"], flat["model.scale"],
                           flat["data.noise_sigma"], pair_id=pid)
        save_ppm(os.path.join(args.out, f"{pid}_rgb.ppm"), pair.guidance)
        save_pgm16(os.path.join(args.out, f"{pid}_depth.pgm"), pair.depth_hr)
        lines.append(f"{pid} {pid}_rgb.ppm {pid}_depth.pgm")
    manifest = os.path.join(args.out, "manifest.txt")
    atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    print(f"manifest={manifest}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dmsr",
                                description="joint-filter depth map super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="master RNG seed")
        sp.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                        help="LR depth noise std in [0,1] units")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--synthetic", type=int, metavar="N",
                   help="train on N generated scenes")
    t.add_argument("--data", help="training manifest")
    t.add_argument("--eval-data", dest="eval_data", help="evaluation manifest")
    t.add_argument("--backbone", choices=("swin", "naf"))
    t.add_argument("--blocks", type=int, help="override block count")
    t.add_argument("--embed-dim", dest="embed_dim", type=int)
    t.add_argument("--window", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--k", type=int, help="filter size (odd)")
    t.add_argument("--scale", type=int, choices=(4, 8, 16))
    t.add_argument("--height", type=int, help="synthetic scene height")
    t.add_argument("--width", type=int, help="synthetic scene width")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="runs/latest", help="output directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="super-resolve one depth map")
    common(i)
    i.add_argument("checkpoint")
    i.add_argument("guidance", help="guidance RGB (PPM)")
    i.add_argument("depth_lr", help="low-resolution depth (16-bit PGM)")
    i.add_argument("--out", required=True, help="SR output (PFM)")
    i.add_argument("--out-preview", dest="out_preview", help="16-bit PGM preview")
    i.add_argument("--gt", help="ground-truth depth (PGM) for PSNR")
    i.add_argument("--identity-head", dest="identity_head", action="store_true",
                   help="debug: delta kernel, output equals bicubic upsample")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--csv", help="per-pair CSV path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="forward-pass latency")
    common(b)
    b.add_argument("--checkpoint")
    b.add_argument("--backbone", choices=("swin", "naf"))
    b.add_argument("--blocks", type=int)
    b.add_argument("--k", type=int)
    b.add_argument("--scale", type=int, choices=(4, 8, 16))
    b.add_argument("--width", type=int, default=128)
    b.add_argument("--height", type=int, default=128)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--csv", help="repeat,ms CSV path")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.add_argument("count", type=int)
    s.add_argument("--scale", type=int, choices=(4, 8, 16))
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--out", default="data/synth")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ImageFormatError, CheckpointError, ShapeError,
            FileNotFoundError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
