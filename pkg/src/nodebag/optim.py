"""Adam with bias correction, learning-rate schedules, and moment averaging."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bagging
from . import tensor as T

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=BETA1, beta2=BETA2, eps=EPS) -> None:
    """One in-place Adam update of every array in ``params``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise T.NonFiniteError(f"non-finite gradient for parameter {key}")
        if g.shape != params[key].shape:
            raise T.ShapeError(f"gradient {g.shape} does not match parameter {key} {params[key].shape}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for key, g in grads.items():
        p = params[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def average_optimizer_state(state: AdamState, key: str) -> None:
    """Average the moments of one grouped parameter (group axis 0, member axis 1)."""
    for moments in (state.m, state.v):
        if key not in moments:
            continue
        acc = moments[key]
        if acc.ndim < 2:
            raise T.ShapeError(f"moment for {key} has shape {acc.shape}; expected (k, n, ...)")
        mean = bagging.group_mean(acc)[:, None]
        moments[key] = np.broadcast_to(mean, acc.shape).copy()


class Adam:
    """Adam over a ``Model``'s parameters, keyed like ``Model.parameters()``."""

    def __init__(self, model):
        self.model = model
        self.state = AdamState()

    def step(self, lr: float) -> None:
        params, grads = {}, {}
        for i, layer in enumerate(self.model.layers):
            for name, p in layer.params.items():
                params[f"{i}.{name}"] = p
                grads[f"{i}.{name}"] = layer.grads[name]
        adam_step(params, grads, self.state, lr)

    def average_groups(self) -> None:
        for i, layer in self.model.grouped_layers:
            for name in layer.params:
                average_optimizer_state(self.state, f"{i}.{name}")


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class PiecewiseSchedule:
    """Contiguous (start_epoch, end_epoch, rate) segments starting at epoch 0.

    Epochs past the last segment keep the last rate.
    """

    segments: tuple

    def __post_init__(self):
        if not self.segments or self.segments[0][0] != 0:
            raise ValueError("schedule segments must start at epoch 0")
        for (_, end, _), (start, _, _) in zip(self.segments, self.segments[1:]):
            if end != start:
                raise ValueError("schedule segments must be contiguous and non-overlapping")


@dataclass(frozen=True)
class PlateauSchedule:
    """Multiply the rate by ``factor`` once validation error stalls for ``patience`` epochs."""

    initial: float = 1e-3
    factor: float = 0.1
    patience: int = 5
    min_rate: float = 1e-5


def mnist_schedule(epochs: int, high=1e-3, low=1e-4) -> PiecewiseSchedule:
    """First half at ``high``, second half at ``low`` (100 + 100 at 200 epochs)."""
    half = max(epochs // 2, 1)
    if epochs <= 1:
        return PiecewiseSchedule(((0, 1, high),))
    return PiecewiseSchedule(((0, half, high), (half, epochs, low)))


def constant_schedule(rate: float) -> PiecewiseSchedule:
    return PiecewiseSchedule(((0, 1, rate),))


def lr_at(schedule, epoch: int, history=()) -> float:
    """Learning rate for ``epoch`` given the validation errors of earlier epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if isinstance(schedule, PiecewiseSchedule):
        for start, end, rate in schedule.segments:
            if start <= epoch < end:
                return rate
        return schedule.segments[-1][2]
    rate = schedule.initial
    best, wait = None, 0
    for err in history:
        if best is None or err < best:
            best, wait = err, 0
            continue
        wait += 1
        if wait >= schedule.patience:
            rate = max(rate * schedule.factor, schedule.min_rate)
            wait = 0
    return rate
