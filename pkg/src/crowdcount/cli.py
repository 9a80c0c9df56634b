"""Command-line entry point: train / eval / stats / render-density / synth.

Configuration precedence per field: command-line flag > config file >
built-in default. The config file is a flat ``key = value`` text document
using the TrainConfig / LossConfig field names (dashes or underscores).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .annotations import Split, Weather, compute_stats, format_stats_kv, format_stats_table
from .losses import LossConfig, RESNET_LEVEL_WEIGHTS
from .network import BackboneConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, format_trace, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def read_config_file(path) -> dict[str, str]:
    """Flat key-value document; '#' starts a comment, '=' separates."""
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes")
    return target_type(value)


def build_train_config(file_values: dict[str, str], overrides: dict) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if overrides.get(f.name) is not None:
            kwargs[f.name] = overrides[f.name]
        elif f.name in file_values:
            kwargs[f.name] = _coerce(file_values[f.name], type(f.default))
    return TrainConfig(**kwargs)


def build_loss_config(file_values: dict[str, str], overrides: dict, backbone: str) -> LossConfig:
    kwargs = {}
    for name in ("lambda_c", "lambda_w"):
        if overrides.get(name) is not None:
            kwargs[name] = overrides[name]
        elif name in file_values:
            kwargs[name] = float(file_values[name])
    if backbone == "resnet101":
        kwargs.setdefault("level_weights", dict(RESNET_LEVEL_WEIGHTS))
    return LossConfig(**kwargs)


def _load_data(data_dir, split: Split):
    from .dataset import load_split

    return load_split(data_dir, split)


def _cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "max_steps": args.max_steps,
        "sigma": args.sigma,
        "crop_size": args.crop_size,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "resize_min": args.resize_min,
        "resize_max": args.resize_max,
        "checkpoint_interval": args.checkpoint_interval,
    }
    tcfg = build_train_config(file_values, overrides)
    lcfg = build_loss_config(
        file_values, {"lambda_c": args.lambda_c, "lambda_w": args.lambda_w}, args.backbone
    )
    train_data = _load_data(args.data, Split.TRAIN)
    val_data = _load_data(args.data, Split.VAL)
    if not train_data:
        print(f"error: no training images under {args.data}", file=sys.stderr)
        return EXIT_RUNTIME
    model = build_model(
        BackboneConfig(kind=args.backbone), class_conditioned=args.class_conditioned
    )
    result = train(model, train_data, val_data, tcfg, lcfg)
    save_checkpoint(result.model, args.out, extra={"sigma": tcfg.sigma})
    trace_path = Path(args.out).with_suffix(".trace.txt")
    trace_path.write_text(format_trace(result.trace))
    if result.best_val_mae is not None:
        print(f"best val MAE: {result.best_val_mae:.3f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .metrics import format_report_kv, format_report_table

    model, _ = load_checkpoint(args.checkpoint)
    data = _load_data(args.data, Split(args.split))
    if not data:
        print(f"error: split {args.split} is empty under {args.data}", file=sys.stderr)
        return EXIT_RUNTIME
    report = evaluate(model, data)
    print(format_report_table(report))
    if args.out:
        Path(args.out).write_text(format_report_kv(report))
    return EXIT_OK


def _cmd_stats(args) -> int:
    from .dataset import load_dataset

    data = load_dataset(args.data, with_images=False)
    if not data:
        print(f"error: no annotated images under {args.data}", file=sys.stderr)
        return EXIT_RUNTIME
    stats = compute_stats([ann for _, ann in data])
    print(format_stats_table(stats))
    if args.out:
        Path(args.out).write_text(format_stats_kv(stats))
    return EXIT_OK


def _cmd_render_density(args) -> int:
    from .dataset import load_split
    from .densitygen import generate_density_map, render_colorized, write_density_binary

    for split in Split:
        for _, ann in load_split(args.data, split, with_images=False):
            if ann.image_id == args.image_id:
                dm = generate_density_map(
                    ann.heads, (ann.width, ann.height), sigma=args.sigma, scale=args.scale
                )
                write_density_binary(dm, args.out)
                if args.png:
                    render_colorized(dm, args.png)
                print(f"{ann.image_id}: count {dm.total:.3f} -> {args.out}")
                return EXIT_OK
    print(f"error: image id {args.image_id!r} not found under {args.data}", file=sys.stderr)
    return EXIT_RUNTIME


def _cmd_synth(args) -> int:
    from .synthdata import SceneSpec, write_scene

    weather = Weather[args.weather.upper().replace("-", "_")]
    for i in range(args.count):
        spec = SceneSpec(
            dims=(args.width, args.height),
            n_heads=args.heads,
            weather=weather,
            placement=args.placement,
            seed=args.seed + i,
        )
        ann = write_scene(spec, args.out, split=Split(args.split))
        print(f"wrote {ann.image_id} ({ann.count} heads)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdcount",
        description="Confidence-guided residual crowd counting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--backbone", choices=("vgg16", "resnet101", "tiny"), default="vgg16")
    p_train.add_argument("--class-conditioned", action="store_true")
    p_train.add_argument("--sigma", type=float)
    p_train.add_argument("--lambda-c", type=float, dest="lambda_c")
    p_train.add_argument("--lambda-w", type=float, dest="lambda_w")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--max-steps", type=int)
    p_train.add_argument("--crop-size", type=int)
    p_train.add_argument("--learning-rate", type=float)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--resize-min", type=int)
    p_train.add_argument("--resize-max", type=int)
    p_train.add_argument("--checkpoint-interval", type=int)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.add_argument("--out", help="write machine-readable report here")
    p_eval.set_defaults(func=_cmd_eval)

    p_stats = sub.add_parser("stats", help="dataset statistics")
    p_stats.add_argument("--data", required=True)
    p_stats.add_argument("--out", help="write machine-readable stats here")
    p_stats.set_defaults(func=_cmd_stats)

    p_rd = sub.add_parser("render-density", help="write a ground-truth density map")
    p_rd.add_argument("--data", required=True)
    p_rd.add_argument("--image-id", required=True)
    p_rd.add_argument("--out", required=True, help="binary grid output path")
    p_rd.add_argument("--png", help="optional colorized raster output")
    p_rd.add_argument("--sigma", type=float, default=4.0)
    p_rd.add_argument("--scale", type=int, default=1)
    p_rd.set_defaults(func=_cmd_render_density)

    p_synth = sub.add_parser("synth", help="generate synthetic scenes")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--count", type=int, default=1)
    p_synth.add_argument("--width", type=int, default=256)
    p_synth.add_argument("--height", type=int, default=256)
    p_synth.add_argument("--heads", type=int, default=50)
    p_synth.add_argument("--weather", default="normal",
                         choices=("normal", "rain", "snow", "fog-haze"))
    p_synth.add_argument("--placement", default="uniform", choices=("uniform", "clustered"))
    p_synth.add_argument("--split", choices=("train", "val", "test"), default="train")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=_cmd_synth)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
