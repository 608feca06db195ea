"""``nodebag`` command line: train, combine, eval, sweep, check.

Exit codes: 0 success, 1 failed check or unexpected error, 2 bad arguments,
3 missing data or model file, 4 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, harness, model_io
from .harness import TrainConfig

EXIT_BAD_ARGS = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4

# flag name -> (TrainConfig field, type)
CONFIG_FLAGS = {
    "arch": ("arch", str),
    "width": ("width", float),
    "method": ("method", str),
    "group-size": ("group_size", int),
    "keep-prob": ("keep_prob", float),
    "activation": ("activation", str),
    "epochs": ("epochs", int),
    "batch-size": ("batch_size", int),
    "lr": ("lr", float),
    "lr-low": ("lr_low", float),
    "lr-schedule": ("lr_schedule", str),
    "avg-frequency": ("avg_frequency", int),
    "seed": ("seed", int),
    "data-dir": ("data_dir", str),
    "val-fraction": ("val_fraction", float),
    "train-subset": ("train_subset", int),
    "test-subset": ("test_subset", int),
}


class UsageError(ValueError):
    pass


def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; keys mirror the flags."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "full-scale":
            values["full_scale"] = _bool(value)
            continue
        if key not in CONFIG_FLAGS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        field, typ = CONFIG_FLAGS[key]
        values[field] = _width(value) if field == "width" else typ(value)
    return values


def _width(value):
    w = float(value)
    return int(w) if w.is_integer() else w


def resolve_config(args) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for field, _ in CONFIG_FLAGS.values():
        v = getattr(args, field, None)
        if v is not None:
            values[field] = _width(v) if field == "width" else v
    if getattr(args, "full_scale", False):
        values["full_scale"] = True
    try:
        return TrainConfig(**values).resolved()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _add_config_flags(p, skip=()):
    p.add_argument("--config", help="key=value config file; flags override it")
    for flag, (field, typ) in CONFIG_FLAGS.items():
        if flag not in skip:
            p.add_argument(f"--{flag}", dest=field, type=typ, default=None)
    p.add_argument("--full-scale", action="store_true",
                   help="full 200-epoch schedules and full training sets")


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _num_list(text):
    return [_width(x) for x in text.split(",") if x]


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodebag", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a grouped model")
    _add_config_flags(p)
    p.add_argument("--out", default="model.nbm", help="model file to write")
    p.add_argument("--metrics", default="metrics.csv", help="per-epoch metrics CSV")

    p = sub.add_parser("combine", help="collapse every group into one node")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="classification error of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=harness.EVAL_MODES, default="combined")
    p.add_argument("--compare", choices=harness.EVAL_MODES,
                   help="also report label agreement with this mode")
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--subset", type=int, default=0, help="use the first N samples only")

    p = sub.add_parser("sweep", help="grid of training runs -> one CSV row per run")
    _add_config_flags(p)
    p.add_argument("--widths", type=_num_list)
    p.add_argument("--methods", type=_str_list)
    p.add_argument("--group-sizes", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--avg-frequencies", type=_int_list)
    p.add_argument("--activations", type=_str_list)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="sweep.csv")

    sub.add_parser("check", help="run the built-in oracle checks")
    return parser


# ---------------------------------------------------------------------------
# verbs

def cmd_train(args):
    config = resolve_config(args)
    datasets = harness.load_datasets(config)

    def progress(row):
        print(f"epoch {row.epoch}/{config.epochs} loss={row.train_loss:.4f} "
              f"val_error={row.val_error:.4f} test_error={row.test_error:.4f} "
              f"lr={row.lr:g}{' averaged' if row.averaged else ''}", flush=True)

    model, rows = harness.train(config, datasets, progress=progress)
    model_io.save_model(model, args.out)
    harness.write_metrics_csv(args.metrics, rows, config)
    print(f"wrote {args.out} and {args.metrics} ({len(rows)} rows)")
    return 0


def parameter_report(model) -> str:
    combined = model.combined()
    grouped_layers = model.grouped_param_count()
    combined_layers = sum(combined.layers[i].param_count() for i, _ in model.grouped_layers)
    total, total_after = model.param_count(), combined.param_count()
    layer_ratio = grouped_layers / combined_layers if combined_layers else 1.0
    return (f"grouped_layer_params={grouped_layers} combined_layer_params={combined_layers} "
            f"layer_reduction={layer_ratio:.2f}x total_params={total} "
            f"combined_total_params={total_after} total_reduction={total / total_after:.2f}x")


def cmd_combine(args):
    model = model_io.load_model(args.model)
    print(parameter_report(model))
    combined = model.combined()
    combined.arch = dict(model.arch, combined=True)
    model_io.save_model(combined, args.out)
    print(f"wrote {args.out}")
    return 0


def _eval_dataset(model, args):
    if model.arch.get("arch", "mnist_fc") == "mnist_fc":
        ds = harness.data.load_mnist_dir(args.data_dir, args.split)
    else:
        ds = harness.data.load_cifar10_dir(args.data_dir, args.split)
    if args.subset:
        ds = ds.subset(np.arange(min(args.subset, len(ds))))
    return ds


def cmd_eval(args):
    model = model_io.load_model(args.model)
    ds = _eval_dataset(model, args)
    labels = harness.predict(model, ds.images, args.mode)
    line = f"mode={args.mode} error={np.mean(labels != ds.labels):.4f} samples={len(ds)}"
    if args.compare:
        other = harness.predict(model, ds.images, args.compare)
        line += f" agreement_with_{args.compare}={np.mean(labels == other):.4f}"
    print(line)
    return 0


def cmd_sweep(args):
    base = resolve_config(args)
    grid = harness.make_grid(base, args.widths, args.methods, args.group_sizes, args.seeds,
                             args.avg_frequencies, args.activations)
    for c in grid:
        try:
            c.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    rows = harness.run_sweep(grid, workers=args.workers)
    Path(args.out).write_text(harness.sweep_csv(rows))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {args.out} ({len(rows)} runs, {failed} failed)")
    return 0


def cmd_check(args):
    return 0 if checks.run_checks() else 1


VERBS = {"train": cmd_train, "combine": cmd_combine, "eval": cmd_eval,
         "sweep": cmd_sweep, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return VERBS[args.verb](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except harness.TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except model_io.ModelFileError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
