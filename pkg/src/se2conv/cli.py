"""Command-line entry point: ``se2conv <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import audit, se2t
from .exceptions import ConfigurationError, DataError
from .models import build_model, count_params, load_checkpoint, preset
from .training import (TrainConfig, evaluate, load_dataset, synth_dataset, train,
                       write_dataset)

log = logging.getLogger("se2conv")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive(v):
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return i


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global flags")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--workers", type=_positive, default=1,
                   help="parallel workers for data loading (default 1, fully reproducible)")
    g.add_argument("--f64", action="store_true", help="run models in 64-bit floating point")
    g.add_argument("--force", action="store_true", help="overwrite existing --out targets")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _add_model(p, required=True):
    p.add_argument("--model", required=required, help="checkpoint file written by 'train'")


def _add_data(p, required=False):
    p.add_argument("--data", required=required,
                   help="dataset directory (manifest.csv, or one sub-directory per split)")
    p.add_argument("--split", default="test", choices=SPLITS, help="split to read (default test)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="se2conv", description="Roto-translation equivariant CNNs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--task", choices=("cls", "seg"), default="cls",
                   help="cls: comet vs disk labels; seg: 3-class masks (default cls)")
    p.add_argument("--n-per-class", type=_positive, default=100,
                   help="samples per class and split (default 100)")
    p.add_argument("--size", type=_positive, default=None,
                   help="patch side length (default 32 for cls, 60 for seg)")
    p.add_argument("--splits", default="train,val,test",
                   help="comma-separated splits to write (default train,val,test)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("params", parents=[common], help="print per-layer weight counts")
    p.add_argument("--task", required=True, help="preset name, e.g. mitosis, nuclei, tumor")
    p.add_argument("--n", type=_positive, required=True, help="orientation count N")
    p.add_argument("--strict-head", action="store_true",
                   help="use the 1x1 conv + per-class affine head for softmax presets")

    p = sub.add_parser("train", parents=[common], help="train a preset model")
    p.add_argument("--task", default="synth-cls", help="preset name (default synth-cls)")
    p.add_argument("--n", type=_positive, default=8, help="orientation count N (default 8)")
    p.add_argument("--data", help="dataset directory with train/ and val/; synthesized if omitted")
    p.add_argument("--n-train", type=_positive, default=2000,
                   help="per-class training samples when synthesizing (default 2000)")
    p.add_argument("--n-val", type=_positive, default=250,
                   help="per-class validation samples when synthesizing (default 250)")
    p.add_argument("--data-seed", type=int, default=100,
                   help="seed of the synthesized data (default 100)")
    p.add_argument("--epochs", type=_positive, default=8, help="maximum epochs (default 8)")
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate (default 0.01)")
    p.add_argument("--batch-size", type=_positive, default=None,
                   help="mini-batch size (default 64, 16 for segmentation)")
    p.add_argument("--patience", type=_positive, default=5,
                   help="early-stopping patience in epochs (default 5)")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.add_argument("--strict-head", action="store_true", help="see 'params --strict-head'")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")

    p = sub.add_parser("eval", parents=[common], help="loss and accuracy of a checkpoint")
    _add_model(p)
    _add_data(p)
    p.add_argument("--n-test", type=_positive, default=500,
                   help="per-class test samples when synthesizing (default 500)")
    p.add_argument("--data-seed", type=int, default=100,
                   help="seed of the synthesized data (default 100)")
    p.add_argument("--out", help="JSON file for the metrics (printed to stdout as well)")

    def add_audit_commands(s):
        q = s.add_parser("polar", parents=[common], help="prediction versus input rotation")
        _add_model(q)
        _add_data(q, required=True)
        q.add_argument("--steps", type=_positive, default=16, help="rotation steps (default 16)")
        q.add_argument("--limit", type=_positive, default=None, help="use the first N samples")
        q.add_argument("--statistic", default="auto", choices=("auto", "value", "boundary", "mean"),
                       help="scalar taken from each prediction (default auto)")
        q.add_argument("--out", required=True, help="CSV: sample_id,k,angle_rad,prediction")
        q.add_argument("--summary", help="optional JSON report with per-sample variances")

        q = s.add_parser("equiv", parents=[common], help="equivariance error of a layer prefix")
        _add_model(q)
        _add_data(q, required=True)
        q.add_argument("--theta-index", type=int, required=True,
                       help="rotate by 2*pi*j/N for this j")
        q.add_argument("--layer-prefix", type=int, default=None,
                       help="number of leading blocks (default: whole network)")
        q.add_argument("--limit", type=_positive, default=8, help="samples to average (default 8)")
        q.add_argument("--out", required=True, help="JSON output")

        q = s.add_parser("align-stats", parents=[common],
                         help="mean/std of re-aligned dense predictions")
        _add_model(q)
        _add_data(q, required=True)
        q.add_argument("--index", type=int, default=0, help="sample index (default 0)")
        q.add_argument("--steps", type=_positive, default=4, help="rotation steps (default 4)")
        q.add_argument("--out", required=True,
                       help="output prefix: <out>.mean.se2t, <out>.std.se2t, <out>.csv")

    add_audit_commands(sub)
    p = sub.add_parser("audit", help="audit subcommands (same as the top-level ones)")
    add_audit_commands(p.add_subparsers(dest="audit_command", required=True,
                                        parser_class=_Parser))
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _claim(path, force: bool, is_dir: bool = False) -> Path:
    """Refuse to clobber an existing target unless ``force``."""
    p = Path(path)
    if p.exists():
        if not force:
            raise UsageError(f"{p} already exists (use --force to overwrite)")
        if p.is_dir() and is_dir:
            shutil.rmtree(p)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True)
    return p


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {p}")
    return p


def _model(args):
    m = load_checkpoint(_need(args.model))
    return m.astype(np.float64) if args.f64 else m


def _data(args, default_task=None):
    if args.data is None:
        task = "seg" if default_task == "seg" else "cls"
        size = 60 if task == "seg" else 32
        return synth_dataset(args.data_seed, args.n_test, size, task, "test")
    return load_dataset(_need(args.data), args.split)


def _fmt(x) -> str:
    return f"{x:.6g}"


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    bad = [s for s in splits if s not in SPLITS]
    if bad or not splits:
        raise UsageError(f"--splits must be drawn from {','.join(SPLITS)}")
    size = args.size or (60 if args.task == "seg" else 32)
    out = _claim(args.out, args.force, is_dir=True)
    for s in splits:
        write_dataset(synth_dataset(args.seed, args.n_per_class, size, args.task, s), out / s)
    print(f"wrote {', '.join(splits)} to {out}")


def cmd_params(args):
    model = build_model(preset(args.task, args.n, args.strict_head))
    total, rows = count_params(model)
    width = max(len(label) for label, _ in rows)
    for label, n in rows:
        print(f"{label:<{width}}  {n}")
    print(f"total {total}")


def cmd_train(args):
    cfg = preset(args.task, args.n, args.strict_head)
    seg = cfg.layers[-1].activation == "softmax"
    out = _claim(args.out, args.force)
    hist = _claim(args.history or f"{out}.history.csv", args.force)
    if args.data is not None:
        root = _need(args.data)
        tr, va = load_dataset(root, "train"), load_dataset(root, "val")
    else:
        task, size = ("seg", 60) if seg else ("cls", 32)
        tr = synth_dataset(args.data_seed, args.n_train, size, task, "train")
        va = synth_dataset(args.data_seed, args.n_val, size, task, "val")
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size or (16 if seg else 64),
                     epochs=args.epochs, patience=args.patience, seed=args.seed,
                     augment=not args.no_augment, workers=args.workers)
    model = build_model(cfg, args.seed, np.float64 if args.f64 else np.float32)
    history = train(model, tr, va, tc, history_path=hist, checkpoint_path=out)
    best = min(history, key=lambda r: r["val_loss"])
    print(json.dumps({"epochs": len(history), "best_epoch": best["epoch"],
                      "val_loss": float(_fmt(best["val_loss"])),
                      "val_metric": float(_fmt(best["val_metric"]))}))


def cmd_eval(args):
    model = _model(args)
    seg = model.config.layers[-1].activation == "softmax"
    out = _claim(args.out, args.force) if args.out else None
    ds = _data(args, "seg" if seg else "cls")
    metrics = {k: float(_fmt(v)) for k, v in evaluate(model, ds).items()}
    metrics["samples"] = len(ds)
    text = json.dumps(metrics, sort_keys=True)
    print(text)
    if out:
        out.write_text(text + "\n", encoding="utf-8")


def cmd_polar(args):
    model = _model(args)
    out = _claim(args.out, args.force)
    summary = _claim(args.summary, args.force) if args.summary else None
    ds = load_dataset(_need(args.data), args.split)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    report = audit.AuditReport(steps=args.steps)
    for i in range(n):
        report.add_polar(i, audit.polar_response(model, ds.images[i], args.steps,
                                                 args.statistic))
    report.write_polar_csv(out)
    if summary:
        summary.write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps({"samples": n, "mean_variance": float(_fmt(report.mean_variance))}))


def cmd_equiv(args):
    model = _model(args)
    out = _claim(args.out, args.force)
    ds = load_dataset(_need(args.data), args.split)
    N = model.config.N
    theta = 2 * math.pi * args.theta_index / N
    L = args.layer_prefix
    if L is not None and not 1 <= L <= len(model.blocks):
        raise UsageError(f"--layer-prefix must lie in 1..{len(model.blocks)}")
    n = min(args.limit, len(ds))
    errs = [audit.equivariance_error(model, ds.images[i], theta, N, L) for i in range(n)]
    report = audit.AuditReport()
    report.add_equivariance("all" if L is None else L, theta,
                            max(e[0] for e in errs), float(np.mean([e[1] for e in errs])))
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    row = report.equivariance[0]
    print(json.dumps({k: (float(_fmt(v)) if isinstance(v, float) else v)
                      for k, v in row.items()}))


def cmd_align_stats(args):
    model = _model(args)
    prefix = str(args.out)
    paths = [_claim(prefix + ext, args.force) for ext in (".mean.se2t", ".std.se2t", ".csv")]
    ds = load_dataset(_need(args.data), args.split)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index must lie in 0..{len(ds) - 1}")
    mean, std = audit.aligned_prediction_stats(model, ds.images[args.index], args.steps)
    se2t.save(paths[0], mean)
    se2t.save(paths[1], std)
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "mean_prediction", "mean_std", "max_std"])
        for c in range(mean.shape[-1]):
            w.writerow([c, _fmt(mean[..., c].mean()), _fmt(std[..., c].mean()),
                        _fmt(std[..., c].max())])
    print(json.dumps({"mean_std": float(_fmt(std.mean())), "max_std": float(_fmt(std.max()))}))


COMMANDS = {"synth": cmd_synth, "params": cmd_params, "train": cmd_train, "eval": cmd_eval,
            "polar": cmd_polar, "equiv": cmd_equiv, "align-stats": cmd_align_stats}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    name = args.audit_command if args.command == "audit" else args.command
    try:
        COMMANDS[name](args)
    except (UsageError, ConfigurationError, DataError, FileNotFoundError) as e:
        print(f"se2conv {name}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"se2conv {name}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
