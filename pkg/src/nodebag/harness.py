"""Training loop, evaluation modes, architectures and sweeps."""
from __future__ import annotations

import csv
import dataclasses
import functools
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bagging, data, optim
from . import tensor as T
from .bagging import GroupSpec
from .layers import (ConvGrouped, ConvPlain, DenseGrouped, DensePlain, Flatten,
                     GlobalAvgPool, MaxPool, Model)

log = logging.getLogger(__name__)

ARCHITECTURES = ("mnist_fc", "cnn_c")
CNN_WIDTHS = (64, 64, 128, 128, 192, 192)
EVAL_MODES = ("combined", "expected", "single-member")

METRICS_HEADER = ["epoch", "train_loss", "train_error", "val_error", "test_error",
                  "seconds", "lr", "averaged"]
SWEEP_HEADER = ["arch", "width", "method", "group_size", "keep_prob", "activation",
                "avg_frequency", "epochs", "seed", "final_test_error", "final_val_error",
                "grouped_params", "combined_params", "runtime_s", "status"]
TIMING_COLUMNS = ("seconds", "runtime_s")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    """One training run.

    ``width`` is the number of groups per hidden layer for ``mnist_fc`` and the
    filter-count multiplier for ``cnn_c``.  ``epochs``, ``train_subset`` and
    ``lr_schedule`` left as ``None`` resolve to desk-scale defaults for the
    architecture, or to the full 200-epoch settings with ``full_scale``.
    ``avg_frequency`` 0 disables weight averaging.
    """

    arch: str = "mnist_fc"
    width: float = 16
    method: str = "A"
    group_size: int = 1
    keep_prob: float = 0.5
    activation: str = "relu"
    epochs: int | None = None
    batch_size: int = 128
    lr: float = 1e-3
    lr_low: float = 1e-4
    lr_schedule: str | None = None  # halving | plateau | constant
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 1e-5
    avg_frequency: int = 10
    seed: int = 1
    data_dir: str = "data/mnist"
    val_fraction: float = 0.1
    train_subset: int | None = None
    test_subset: int = 0
    full_scale: bool = False

    def resolved(self) -> "TrainConfig":
        c = dataclasses.replace(self)
        if c.epochs is None:
            c.epochs = 200 if c.full_scale else {"mnist_fc": 30, "cnn_c": 20}.get(c.arch, 30)
        if c.train_subset is None:
            c.train_subset = 10000 if (c.arch == "cnn_c" and not c.full_scale) else 0
        if c.lr_schedule is None:
            c.lr_schedule = "plateau" if c.arch == "cnn_c" else "halving"
        c.validate()
        return c

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.avg_frequency < 0:
            raise ValueError(f"avg_frequency must be >= 0, got {self.avg_frequency}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.activation not in ("relu", "sigmoid", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.lr_schedule not in (None, "halving", "plateau", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        GroupSpec(1, self.group_size, self.method, self.keep_prob)

    def schedule(self):
        if self.lr_schedule == "plateau":
            return optim.PlateauSchedule(self.lr, self.plateau_factor, self.plateau_patience,
                                         self.min_lr)
        if self.lr_schedule == "constant":
            return optim.constant_schedule(self.lr)
        return optim.mnist_schedule(self.epochs, self.lr, self.lr_low)

    def spec(self, groups: int) -> GroupSpec:
        return GroupSpec(groups, self.group_size, self.method, self.keep_prob)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_error: float
    val_error: float
    test_error: float
    seconds: float
    lr: float
    averaged: bool

    def as_list(self):
        return [self.epoch, repr(self.train_loss), repr(self.train_error), repr(self.val_error),
                repr(self.test_error), f"{self.seconds:.3f}", repr(self.lr), int(self.averaged)]


# ---------------------------------------------------------------------------
# architectures

def cnn_widths(multiplier: float) -> list[int]:
    return [max(1, int(round(w * multiplier))) for w in CNN_WIDTHS]


def _dense(fan_in, units, config, rng, plain):
    if plain:
        return DensePlain.init(fan_in, units, rng, config.activation)
    return DenseGrouped.init(fan_in, config.spec(units), rng, config.activation)


def _conv(cin, cout, kernel, config, rng, plain, padding="same"):
    if plain:
        return ConvPlain.init(cin, cout, kernel, rng, padding=padding, activation=config.activation)
    return ConvGrouped.init(cin, config.spec(cout), kernel, rng, padding=padding,
                            activation=config.activation)


def build_model(config: TrainConfig, plain: bool = False) -> Model:
    """Grouped training network for ``config``.

    With ``plain=True`` the hidden layers are ordinary layers drawn from the
    same generator stream, which makes a group-size-1 method-B model and its
    plain twin start from identical parameters.
    """
    config.validate()
    rng = bagging.spawn_generators(config.seed, 2)[0]
    arch = {"arch": config.arch, "width": config.width, "group_size": config.group_size,
            "method": config.method, "keep_prob": config.keep_prob,
            "activation": config.activation, "plain": plain}
    if config.arch == "mnist_fc":
        k = int(config.width)
        layers = [Flatten(),
                  _dense(784, k, config, rng, plain),
                  _dense(k, k, config, rng, plain),
                  DensePlain.init(k, 10, rng, "linear")]
        return Model(layers, arch)
    w = cnn_widths(config.width)
    layers = [_conv(3, w[0], 3, config, rng, plain),
              _conv(w[0], w[1], 3, config, rng, plain),
              MaxPool(3, 2),
              _conv(w[1], w[2], 3, config, rng, plain),
              _conv(w[2], w[3], 3, config, rng, plain),
              MaxPool(3, 2),
              _conv(w[3], w[4], 3, config, rng, plain, padding="valid"),
              ConvPlain.init(w[4], w[5], 1, rng, activation=config.activation),
              GlobalAvgPool(),
              DensePlain.init(w[5], 10, rng, "linear")]
    return Model(layers, arch)


# ---------------------------------------------------------------------------
# data

def load_datasets(config: TrainConfig) -> dict:
    """train / val / test splits for the config's architecture."""
    config = config.resolved()
    if config.arch == "mnist_fc":
        full = data.load_mnist_dir(config.data_dir, "train")
        test = data.load_mnist_dir(config.data_dir, "test")
    else:
        full = data.load_cifar10_dir(config.data_dir, "train")
        test = data.load_cifar10_dir(config.data_dir, "test")
    train, val = data.split_train_val(full, config.val_fraction, config.seed)
    if config.train_subset:
        idx = np.sort(np.random.default_rng(config.seed).permutation(len(train))[:config.train_subset])
        train = train.subset(idx)
    if config.test_subset:
        test = test.subset(np.arange(min(config.test_subset, len(test))))
    return {"train": train, "val": val, "test": test}


# ---------------------------------------------------------------------------
# evaluation

def inference_model(model: Model, mode: str = "combined") -> Model:
    if mode == "combined":
        return model.combined()
    if mode == "single-member":
        return model.single_member()
    raise ValueError(f"unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")


def predict(model: Model, images, mode="combined", batch_size=1000) -> np.ndarray:
    if mode == "expected":
        run = model.forward_expected
    else:
        run = inference_model(model, mode).forward
    out = [run(images[i:i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, dataset, mode="combined", batch_size=1000) -> float:
    """Classification error in [0, 1]."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.images, mode, batch_size) != dataset.labels))


# ---------------------------------------------------------------------------
# training

def train(config: TrainConfig, datasets: dict, model: Model | None = None, progress=None):
    """Train ``model`` (built from ``config`` if omitted); returns (model, metrics rows)."""
    config = config.resolved()
    if model is None:
        model = build_model(config)
    mask_rng = bagging.spawn_generators(config.seed, 2)[1]
    schedule = config.schedule()
    opt = optim.Adam(model)
    loss_op = T.SoftmaxCrossEntropy()
    history, rows = [], []
    train_set = datasets["train"]

    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = optim.lr_at(schedule, epoch, history)
        plan = data.BatchPlan(config.seed, config.batch_size, epoch)
        loss_sum, wrong = 0.0, 0
        for b, (x, y) in enumerate(data.batches(train_set, plan)):
            masks = model.sample_masks(len(y), mask_rng)
            try:
                logits = model.forward(x, masks)
                loss, probs = loss_op.forward(logits, y)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, b, loss)
                model.backward(loss_op.backward())
                opt.step(lr)
            except TrainingDivergedError:
                raise
            except FloatingPointError as exc:  # overflow or NaN inside the step
                raise TrainingDivergedError(epoch, b, float("nan")) from exc
            loss_sum += loss * len(y)
            wrong += int(np.sum(probs.argmax(axis=1) != y))

        averaged = config.avg_frequency > 0 and (epoch + 1) % config.avg_frequency == 0
        if averaged:
            model.average()
            opt.average_groups()

        deployed = model.combined()
        val_err = evaluate(deployed, datasets["val"]) if len(datasets["val"]) else 0.0
        test_err = evaluate(deployed, datasets["test"])
        history.append(val_err)
        n = max(len(train_set), 1)
        row = MetricsRow(epoch + 1, loss_sum / n, wrong / n, val_err, test_err,
                         time.perf_counter() - start, lr, averaged)
        rows.append(row)
        if progress:
            progress(row)
    return model, rows


def metrics_csv(rows, config: TrainConfig | None = None) -> str:
    """CSV text: resolved config as ``# key=value`` comments, then header and rows."""
    buf = io.StringIO()
    if config is not None:
        for key, value in config.as_dict().items():
            buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row.as_list())
    return buf.getvalue()


def write_metrics_csv(path, rows, config=None) -> None:
    Path(path).write_text(metrics_csv(rows, config))


# ---------------------------------------------------------------------------
# sweeps

def make_grid(base: TrainConfig, widths=None, methods=None, group_sizes=None, seeds=None,
              avg_frequencies=None, activations=None) -> list[TrainConfig]:
    grid = []
    for width in widths or [base.width]:
        for method in methods or [base.method]:
            for n in group_sizes or [base.group_size]:
                for freq in avg_frequencies or [base.avg_frequency]:
                    for act in activations or [base.activation]:
                        for seed in seeds or [base.seed]:
                            grid.append(dataclasses.replace(
                                base, width=width, method=method, group_size=n,
                                avg_frequency=freq, activation=act, seed=seed))
    return grid


@functools.lru_cache(maxsize=4)
def _cached_datasets(arch, data_dir, val_fraction, seed, train_subset, test_subset, full_scale):
    cfg = TrainConfig(arch=arch, data_dir=data_dir, val_fraction=val_fraction, seed=seed,
                      train_subset=train_subset, test_subset=test_subset, full_scale=full_scale)
    return load_datasets(cfg)


def run_one(config: TrainConfig, datasets=None) -> dict:
    """One sweep row; failures are recorded in ``status`` rather than raised."""
    config = config.resolved()
    row = {"arch": config.arch, "width": config.width, "method": config.method,
           "group_size": config.group_size, "keep_prob": config.keep_prob,
           "activation": config.activation, "avg_frequency": config.avg_frequency,
           "epochs": config.epochs, "seed": config.seed, "final_test_error": "",
           "final_val_error": "", "grouped_params": "", "combined_params": "",
           "runtime_s": "", "status": "ok"}
    start = time.perf_counter()
    try:
        if datasets is None:
            datasets = _cached_datasets(config.arch, config.data_dir, config.val_fraction,
                                        config.seed, config.train_subset, config.test_subset,
                                        config.full_scale)
        model, rows = train(config, datasets)
        row.update(final_test_error=rows[-1].test_error, final_val_error=rows[-1].val_error,
                   grouped_params=model.param_count(),
                   combined_params=model.combined().param_count())
    except Exception as exc:  # a failed run must not stop the sweep
        log.exception("run failed: %s", config)
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    row["runtime_s"] = round(time.perf_counter() - start, 3)
    return row


def _sort_key(row):
    return (row["width"], row["method"], row["group_size"], row["seed"],
            row["avg_frequency"], row["activation"], row["keep_prob"])


def run_sweep(configs, workers: int = 1, datasets=None) -> list[dict]:
    """Run independent configs (in parallel when ``workers > 1``); rows sorted by
    (width, method, group size, seed)."""
    configs = list(configs)
    if workers > 1 and datasets is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, configs))
    else:
        rows = [run_one(c, datasets) for c in configs]
    return sorted(rows, key=_sort_key)


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
