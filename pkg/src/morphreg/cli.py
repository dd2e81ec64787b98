"""Command-line interface.

Subcommands: ``synth`` (generate registration problems), ``train`` (fit the
amortized network), ``register`` (amortized and/or instance-specific),
``warp`` (apply a stored field), ``eval`` (Dice + folding report).  Every
run writes a key=value manifest next to its outputs; re-running the command
recorded in a manifest reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__, formats, metrics, net, optim, synth
from .grid import GeometryError, GridImage, check_same_geometry
from .losses import SEG_ONLY, LossWeights
from .optim import NumericalError
from .warp import warp_image

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def write_manifest(path, subcommand: str, values: dict) -> None:
    lines = [f"subcommand={subcommand}", f"artifact_version={__version__}"]
    for key in sorted(values):
        lines.append(f"{key}={values[key]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}, expected e.g. 64,64")
    if len(dims) not in (2, 3):
        raise argparse.ArgumentTypeError("dims must have 2 or 3 axes")
    return dims


def _parse_filters(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(","))


def _parse_gamma(text: str):
    if text == "seg-only":
        return SEG_ONLY
    return float(text)


def _read_coarse_map(path) -> dict[int, int]:
    mapping: dict[int, int] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2:
                raise formats.FormatError(f"bad coarse-map line {lineno}: {line!r}")
            mapping[int(parts[0])] = int(parts[1])
    if not mapping:
        raise formats.FormatError("empty coarse-map file")
    return mapping


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if any(d % 8 for d in args.dims):
        print(
            f"warning: dims {args.dims} not divisible by 8; "
            "default-depth training will reject this geometry",
            file=sys.stderr,
        )
    spec = synth.SynthSpec(
        dims=args.dims,
        num_structures=args.structures,
        amplitude=args.amplitude,
        control_spacing=args.control_spacing,
        noise=args.noise,
        seed=args.seed,
        contrasts=tuple(float(c) for c in args.contrasts.split(",")) if args.contrasts else None,
    )
    for i, pair in enumerate(synth.generate_dataset(spec, args.count)):
        formats.save_pair(args.out, f"pair{i:03d}", pair)
    write_manifest(
        os.path.join(args.out, "manifest.txt"),
        "synth",
        {
            "count": args.count,
            "dims": ",".join(map(str, args.dims)),
            "structures": args.structures,
            "amplitude": args.amplitude,
            "control_spacing": args.control_spacing,
            "noise": args.noise,
            "seed": args.seed,
            "contrasts": args.contrasts or "",
            "out": args.out,
        },
    )
    print(f"wrote {args.count} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    pairs = formats.load_pairs(args.data)
    n_val = max(1, round(args.val_fraction * len(pairs))) if args.val_fraction > 0 else 0
    if n_val >= len(pairs):
        raise ValueError("validation split leaves no training pairs")
    train_pairs = pairs[: len(pairs) - n_val] if n_val else pairs
    val_pairs = pairs[len(pairs) - n_val :] if n_val else None
    if val_pairs and any(p.fixed_seg is None for p in val_pairs):
        val_pairs = None

    observed = None
    if args.observed_labels not in (None, "all"):
        observed = tuple(int(t) for t in args.observed_labels.split(","))
    merge = _read_coarse_map(args.coarse_map) if args.coarse_map else None
    cfg = optim.TrainConfig(
        iterations=args.iters,
        weights=LossWeights(args.lam, args.gamma, args.cc_window),
        sim_kind=args.loss,
        learning_rate=args.lr,
        seed=args.seed,
        observed_labels=observed,
        label_merge=merge,
    )
    config = net.NetConfig(args.encoder_filters, args.decoder_filters)
    t0 = time.time()
    result = optim.train(config, train_pairs, cfg, val_pairs=val_pairs)
    net.save_params(args.out, result.best_params)
    with open(args.out + ".log", "w") as fh:
        for rec in result.log:
            fields = " ".join(f"{k}={v}" for k, v in rec.items())
            fh.write(fields + "\n")
        fh.write(f"wall_time_s={time.time() - t0:.1f}\n")
    write_manifest(
        args.out + ".manifest",
        "train",
        {
            "data": args.data,
            "loss": args.loss,
            "lambda": args.lam,
            "gamma": "seg-only" if args.gamma is SEG_ONLY else args.gamma,
            "cc_window": args.cc_window,
            "observed_labels": args.observed_labels or "all",
            "coarse_map": args.coarse_map or "",
            "iters": args.iters,
            "lr": args.lr,
            "seed": args.seed,
            "val_fraction": args.val_fraction,
            "encoder_filters": ",".join(map(str, args.encoder_filters)),
            "decoder_filters": ",".join(map(str, args.decoder_filters)),
            "out": args.out,
        },
    )
    print(f"model written to {args.out} (best validation Dice {result.best_val_dice:.4f})")
    return 0


def cmd_register(args) -> int:
    fixed = formats.read_image(args.fixed)
    moving = formats.read_image(args.moving)
    check_same_geometry(fixed, moving)
    weights = LossWeights(args.lam, 0.0, args.cc_window)
    if args.model is not None:
        params = net.load_params(args.model)
        field = net.predict_displacement(params, fixed, moving)
        if args.instance_iters > 0:
            field, _ = optim.optimize_instance(
                fixed, moving, field, weights,
                iterations=args.instance_iters, sim_kind=args.loss,
                learning_rate=args.lr,
            )
    else:
        field, _ = optim.optimize_instance(
            fixed, moving, None, weights,
            iterations=args.instance_iters or 100, sim_kind=args.loss,
            learning_rate=args.lr,
        )
    if args.out_field:
        formats.write_field(args.out_field, field)
    if args.out_warped:
        formats.write_image(args.out_warped, warp_image(moving, field))
    target = args.out_field or args.out_warped
    write_manifest(
        target + ".manifest",
        "register",
        {
            "fixed": args.fixed,
            "moving": args.moving,
            "model": args.model or "",
            "no_model": args.no_model,
            "instance_iters": args.instance_iters,
            "loss": args.loss,
            "lambda": args.lam,
            "cc_window": args.cc_window,
            "lr": args.lr,
            "out_field": args.out_field or "",
            "out_warped": args.out_warped or "",
        },
    )
    return 0


def cmd_warp(args) -> int:
    image = formats.read_image(args.image)
    field = formats.read_field(args.field)
    warped = warp_image(image, field)
    formats.write_image(args.out, warped)
    write_manifest(
        args.out + ".manifest",
        "warp",
        {"image": args.image, "field": args.field, "out": args.out},
    )
    return 0


def cmd_eval(args) -> int:
    fixed_seg = formats.read_image(args.fixed_seg)
    moving_seg = formats.read_image(args.moving_seg)
    field = formats.read_field(args.field)
    mask = formats.read_image(args.mask) if args.mask else None
    num_labels = int(max(fixed_seg.values.max(), moving_seg.values.max())) + 1
    dice = metrics.dice_eval(
        fixed_seg, moving_seg, field, num_labels,
        include_background=args.include_background,
    )
    reg = metrics.jacobian_report(field, mask)
    row = metrics.format_report_row(args.pair_id, dice, reg)
    metrics.write_report(args.report, [row])
    write_manifest(
        args.report + ".manifest",
        "eval",
        {
            "fixed_seg": args.fixed_seg,
            "moving_seg": args.moving_seg,
            "field": args.field,
            "mask": args.mask or "",
            "pair_id": args.pair_id,
            "include_background": args.include_background,
            "report": args.report,
        },
    )
    print(
        f"mean Dice {dice.mean:.4f} over {len(dice.per_structure)} structures; "
        f"folding {reg.folding_count}/{reg.evaluated_voxel_count} "
        f"({100 * reg.folding_fraction:.2f}%)"
    )
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphreg", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate synthetic registration pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--dims", type=_parse_dims, default=(64, 64))
    p.add_argument("--structures", type=int, default=3)
    p.add_argument("--amplitude", type=float, default=4.0)
    p.add_argument("--control-spacing", type=float, default=16.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--contrasts", default=None, help="comma-separated structure intensities")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the amortized registration network")
    p.add_argument("--data", required=True)
    p.add_argument("--loss", choices=("mse", "cc"), default="mse")
    p.add_argument("--lambda", dest="lam", type=float, default=0.02)
    p.add_argument("--gamma", type=_parse_gamma, default=0.0, help="float or 'seg-only'")
    p.add_argument("--cc-window", type=int, default=9)
    p.add_argument("--observed-labels", default="all", help="'all' or comma-separated codes")
    p.add_argument("--coarse-map", default=None, help="file of 'orig group' label pairs")
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--encoder-filters", type=_parse_filters, default=(16, 32, 32))
    p.add_argument("--decoder-filters", type=_parse_filters, default=(32, 32, 32, 16))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register a moving image to a fixed image")
    p.add_argument("--model", default=None)
    p.add_argument("--no-model", action="store_true", help="instance optimization from zero")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--instance-iters", type=int, default=0)
    p.add_argument("--loss", choices=("mse", "cc"), default="mse")
    p.add_argument("--lambda", dest="lam", type=float, default=0.02)
    p.add_argument("--cc-window", type=int, default=9)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--out-field", default=None)
    p.add_argument("--out-warped", default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply a stored displacement field to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("eval", help="Dice and deformation-regularity report")
    p.add_argument("--fixed-seg", required=True)
    p.add_argument("--moving-seg", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--pair-id", default="pair")
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand == "register":
        if not (args.out_field or args.out_warped):
            parser.error("register needs --out-field and/or --out-warped")
        if args.model is None and not args.no_model:
            parser.error("register needs --model or --no-model")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (formats.FormatError, GeometryError, FileNotFoundError, NotADirectoryError,
            PermissionError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
