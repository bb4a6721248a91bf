"""Command-line surface: model summaries, training, prediction, evaluation,
gradient checking and synthetic-data generation.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .complexity import count_macs, count_params, report_render
from .modelio import (dataset_scan, load_checkpoint, load_dataset, read_image,
                      save_checkpoint, write_mask, write_pgm)
from .network import (ENCODER_CHOICES, GATE_CHOICES, PRESET_CHANNELS,
                      VariantConfig, build_network)
from .ops import _sigmoid_stable, resize_bilinear_array
from .tensor import no_grad
from .training import (Sample, TrainConfig, evaluate, history_to_csv,
                       synth_dataset, train_loop)
from .training import _resize_nearest


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_int_list(text: str, expected: int | None = None) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad integer list {text!r}") from exc
    if expected is not None and len(values) != expected:
        raise UsageError(f"expected {expected} comma-separated values, got {text!r}")
    return values


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad decimal list {text!r}") from exc


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MKUNET_THREADS", "1")))
    except ValueError:
        return 1


def _config_from_args(args) -> VariantConfig:
    if getattr(args, "channels", None):
        channels = _parse_int_list(args.channels, expected=5)
    else:
        channels = PRESET_CHANNELS[args.variant]
    return VariantConfig(channels=channels,
                         kernels=_parse_int_list(args.kernels),
                         encoder_block=args.encoder, gate=args.gate)


# ---------------------------------------------------------------------------
# subcommands


def cmd_summary(args) -> int:
    if bool(args.variant) == bool(args.channels):
        raise UsageError("pass exactly one of --variant / --channels")
    cfg = _config_from_args(args)
    if args.input_size:
        report = count_macs(cfg, args.input_size, args.input_size)
    else:
        report = count_params(cfg)
    print(report_render(report, args.format))
    return 0


def _fit_samples(samples: list[Sample], size: int) -> list[Sample]:
    out = []
    for s in samples:
        if s.image.shape[-2:] == (size, size):
            out.append(s)
            continue
        image = resize_bilinear_array(s.image[None], size, size)[0]
        mask = (_resize_nearest(s.mask[None], size, size)[0] > 0.5).astype(np.float32)
        out.append(Sample(image=image.astype(np.float32), mask=mask))
    return out


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    train_cfg = TrainConfig(lr=args.lr, weight_decay=args.wd, epochs=args.epochs,
                            batch=args.batch, scales=_parse_float_list(args.scales),
                            clip_norm=args.clip, img_size=args.img_size,
                            seed=args.seed, val_fraction=args.val_fraction)
    if args.synth is not None:
        data = synth_dataset(args.synth, args.img_size, args.seed)
    else:
        if not Path(args.data).is_dir():
            raise FileNotFoundError(f"dataset directory {args.data} does not exist")
        data = _fit_samples(load_dataset(args.data), args.img_size)
    if not data:
        raise ValueError(f"no samples found under {args.data}")
    net = build_network(cfg, seed=args.seed)
    result = train_loop(net, train_cfg, data, log=print, threads=args.threads)
    net.load_tensors(result.best_tensors)
    save_checkpoint(net, args.out)
    print(f"best val DICE {result.best_val_dice:.4f} at epoch {result.best_epoch}; "
          f"checkpoint -> {args.out}")
    if args.history:
        Path(args.history).write_text(history_to_csv(result.history))
        print(f"history -> {args.history}")
    return 0


def cmd_predict(args) -> int:
    net = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    _, _, h, w = image.shape
    if h % 16 or w % 16 or h < 32 or w < 32:
        need_h = max(32, -(-h // 16) * 16)
        need_w = max(32, -(-w // 16) * 16)
        print(f"error: image is {h}x{w}; pad to {need_h}x{need_w} "
              f"(dims must be >= 32 and divisible by 16)", file=sys.stderr)
        return 2
    with no_grad():
        logits = net.forward(image, mode="eval").p1
    prob = _sigmoid_stable(logits.data)
    write_mask(prob, args.out, as_binary=not args.prob, threshold=args.threshold)
    print(f"mask -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.ckpt)
    pairs = dataset_scan(args.data)
    if not pairs:
        print(f"error: no samples under {args.data}", file=sys.stderr)
        return 2
    data = load_dataset(args.data)
    result = evaluate(net, data, threshold=args.threshold, threads=args.threads)
    print(f"{'stem':<24} {'dice':>8} {'iou':>8}")
    for (stem, _, _), (dice, iou) in zip(pairs, result.per_sample):
        print(f"{stem:<24} {dice:8.4f} {iou:8.4f}")
    print(f"mean_dice {result.mean_dice:.4f}")
    print(f"mean_iou {result.mean_iou:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = gradcheck_mod.BLOCK_NAMES if args.block == "all" else (args.block,)
    any_failed = False
    for name in names:
        results = gradcheck_mod.check_block(name, eps=args.eps, tol=args.tol,
                                            seed=args.seed)
        worst = max(r.max_rel_err for _, r in results)
        failed = [label for label, r in results if not r.passed]
        excluded = sum(r.excluded for _, r in results)
        status = "FAIL" if failed else "pass"
        print(f"{name:6s} {status}  max_rel_err={worst:.3e}  "
              f"checks={len(results)}  kink_excluded={excluded}")
        if failed:
            any_failed = True
            for label in failed[:5]:
                print(f"       failed: {label}")
    return 3 if any_failed else 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = synth_dataset(args.count, args.size, args.seed)
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        write_pgm(out / "images" / f"{stem}.pgm",
                  np.rint(255.0 * s.image[0]).astype(np.uint8))
        write_pgm(out / "masks" / f"{stem}.pgm",
                  (s.mask[0] > 0.5).astype(np.uint8) * 255)
    print(f"{len(samples)} samples -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p, default_variant=None):
    p.add_argument("--variant", choices=sorted(PRESET_CHANNELS), default=default_variant)
    p.add_argument("--channels", help="five comma-separated widths (overrides --variant)")
    p.add_argument("--kernels", default="1,3,5", help="comma-separated odd kernel sizes")
    p.add_argument("--gate", choices=GATE_CHOICES, default="gag")
    p.add_argument("--encoder", choices=ENCODER_CHOICES, default="mkir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mkunet",
                     description="Ultra-lightweight multi-kernel segmentation networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="analytic parameter/MAC report")
    _add_model_flags(p)
    p.add_argument("--input-size", type=int, default=None,
                   help="input side for MAC counting (params only when omitted)")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("train", help="train on a dataset directory or synthetic data")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory with images/ and masks/")
    src.add_argument("--synth", type=int, help="generate N synthetic samples")
    _add_model_flags(p, default_variant="std")
    p.add_argument("--img-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--clip", type=float, default=0.5)
    p.add_argument("--scales", default="0.75,1.0,1.25")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True, help="best-checkpoint path")
    p.add_argument("--history", help="CSV history path (epoch,train_loss,val_dice)")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="evaluation parallelism (training steps stay single-threaded)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write a mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--prob", action="store_true", help="write probabilities, not a binary mask")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mean DICE/IoU over a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification (float64)")
    p.add_argument("--block", choices=gradcheck_mod.BLOCK_NAMES + ("all",), default="all")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
