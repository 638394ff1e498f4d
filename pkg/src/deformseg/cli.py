"""Command-line entry points.

Subcommands: gen-data, train, eval, sweep, retention.  Exit codes:
0 success, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys

from . import data as data_mod
from . import harness
from .config import desk_bundle, load_config
from .errors import ConfigError, DataError, NumericalError


def _bundle(args):
    return load_config(args.config) if args.config else desk_bundle()


def _cmd_gen_data(args):
    bundle = _bundle(args)
    n_val = args.val_count if args.val_count is not None else max(1, args.count // 4)
    rows = data_mod.write_dataset(args.out, bundle.scene, args.count, n_val)
    print(f"wrote {args.count} train + {n_val} val samples to {args.out} "
          f"({len(rows)} manifest rows)")


def _cmd_train(args):
    bundle = _bundle(args)
    train_samples = data_mod.load_split(args.data, "train")
    val_samples = data_mod.load_split(args.data, "val")

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  lr-cos  train {rec.train_loss:.4f}  "
              f"val {rec.val_loss:.4f}  miou {rec.val_miou:.4f}  {rec.seconds:.1f}s")

    _, runlog, (best, final) = harness.train(
        bundle.model, bundle.train, train_samples, val_samples,
        out_dir=args.out, scene_cfg=bundle.scene, progress=progress)
    print(f"best checkpoint: {best}")
    print(f"final checkpoint: {final}")
    print(f"final val mIoU: {runlog.records[-1].val_miou:.4f}")


def _cmd_eval(args):
    samples = data_mod.load_split(args.data, args.split)
    report, _ = harness.evaluate_checkpoint(args.checkpoint, samples,
                                              report_path=args.report)
    print(report.to_csv(), end="")
    if args.report:
        print(f"report written to {args.report}")


def _cmd_sweep(args):
    bundle = _bundle(args)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if not sizes:
        raise ConfigError("--sizes must list at least one budget")
    train_samples = data_mod.load_split(args.data, "train")
    val_samples = data_mod.load_split(args.data, "val")
    rows = harness.sensitivity_sweep(sizes, bundle.model, bundle.train,
                                       train_samples, val_samples, out_csv=args.out,
                                       scene_cfg=bundle.scene)
    for size, score, secs in rows:
        print(f"size {size:6d}  val mIoU {score:.4f}  {secs:.1f}s")
    if args.out:
        print(f"sweep CSV written to {args.out}")


def _cmd_retention(args):
    source = data_mod.load_split(args.source, args.split)
    target = data_mod.load_split(args.target, args.split)
    result = harness.retention_run(args.checkpoint, source, target)
    print(f"source mIoU: {result['miou_source']:.4f}")
    print(f"target mIoU: {result['miou_target']:.4f}")
    print(f"retention:   {result['retention']:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="deformseg",
                                     description="dual-branch deformable segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True, help="training sample count")
    p.add_argument("--val-count", type=int, default=None,
                   help="validation sample count (default: count // 4)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None, help="CSV output path")
    p.add_argument("--split", default="val")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="sample-size sensitivity sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--sizes", required=True, help="comma-separated budgets, ascending")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("retention", help="cross-domain retention of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(func=_cmd_retention)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
