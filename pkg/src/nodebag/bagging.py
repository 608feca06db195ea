"""Group primitives: mask sampling, group reduction, averaging and combination.

A bagged layer holds ``k`` groups of ``n`` member nodes.  During training each
sample sees a binary mask ``m[k, n]`` and group ``i`` emits
``sum_j m[i, j] * y[i, j]``.  At inference each group is collapsed into one node
with weight ``E[m] * sum_j w[i, j]`` and bias ``E[m] * sum_j b[i, j]``.

Member parameters are always laid out with the group axis first and the member
axis second: weights ``(k, n, ...)``, biases ``(k, n)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T

METHODS = ("A", "B")
MAX_ENUMERATION = 20


class EnumerationError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    """Configuration of one bagged layer.

    ``method`` "A" keeps every member independently with probability
    ``keep_prob``; "B" keeps exactly one member per group, chosen uniformly.
    ``keep_prob`` is ignored under method B.
    """

    group_count: int
    group_size: int
    method: str = "A"
    keep_prob: float = 0.5

    def __post_init__(self):
        if self.group_count < 1 or self.group_size < 1:
            raise ValueError(f"group count and size must be >= 1, got "
                             f"k={self.group_count}, n={self.group_size}")
        if self.method not in METHODS:
            raise ValueError(f"method must be 'A' or 'B', got {self.method!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")

    def as_dict(self) -> dict:
        return {"group_count": self.group_count, "group_size": self.group_size,
                "method": self.method, "keep_prob": self.keep_prob}


def expected_keep(spec: GroupSpec) -> float:
    if spec.method == "A":
        return spec.keep_prob
    return 1.0 / spec.group_size


def sample_mask(spec: GroupSpec, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a (batch, k, n) mask, fresh for every sample."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    k, n = spec.group_count, spec.group_size
    if spec.method == "A":
        return (rng.random((batch, k, n)) < spec.keep_prob).astype(T.get_dtype())
    chosen = rng.integers(0, n, size=(batch, k))
    mask = np.zeros((batch, k, n), dtype=T.get_dtype())
    np.put_along_axis(mask, chosen[..., None], 1.0, axis=2)
    return mask


def check_mask(mask: np.ndarray, spec: GroupSpec, batch: int | None = None) -> None:
    expect = (spec.group_count, spec.group_size)
    if mask.ndim != 3 or mask.shape[1:] != expect or (batch is not None and mask.shape[0] != batch):
        raise T.ShapeError(f"mask shape {mask.shape} does not match "
                           f"(batch={batch}, k={expect[0]}, n={expect[1]})")


def group_reduce(member_outputs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked sum over the member axis.

    ``member_outputs`` is ``(B, k, n)`` or ``(B, k, n, H, W)``; a mask entry
    gates the whole feature map of its member.
    """
    if member_outputs.shape[:3] != mask.shape:
        raise T.ShapeError(f"group_reduce: outputs {member_outputs.shape} vs mask {mask.shape}")
    m = mask.reshape(mask.shape + (1,) * (member_outputs.ndim - 3))
    return (member_outputs * m).sum(axis=2)


def group_mean(x: np.ndarray) -> np.ndarray:
    """Mean over axis 1, shifted by member 0 so identical members are returned exactly."""
    base = x[:, :1]
    return base[:, 0] + (x - base).mean(axis=1)


def weight_average(member_weights: np.ndarray, member_biases: np.ndarray):
    """Replace every member of each group by the group mean."""
    w_mean = group_mean(member_weights)[:, None]
    b_mean = group_mean(member_biases)[:, None]
    return (np.broadcast_to(w_mean, member_weights.shape).copy(),
            np.broadcast_to(b_mean, member_biases.shape).copy())


def combine_group(member_weights: np.ndarray, member_biases: np.ndarray, spec: GroupSpec):
    """Collapse each group into one node: ``(k, n, ...) -> (k, ...)``."""
    k, n = spec.group_count, spec.group_size
    if member_weights.shape[:2] != (k, n) or member_biases.shape != (k, n):
        raise T.ShapeError(f"combine_group: weights {member_weights.shape} / biases "
                           f"{member_biases.shape} do not match k={k}, n={n}")
    if spec.method == "B":
        # E[m] * sum == mean; computed as a mean so identical members stay exact
        return group_mean(member_weights), group_mean(member_biases)
    p = spec.keep_prob
    return p * member_weights.sum(axis=1), p * member_biases.sum(axis=1)


def mask_distribution(spec: GroupSpec):
    """All masks of one group with their probabilities: ``(M, n)`` and ``(M,)``."""
    n = spec.group_size
    if n > MAX_ENUMERATION:
        raise EnumerationError(f"group size {n} too large to enumerate (max {MAX_ENUMERATION})")
    if spec.method == "B":
        return np.eye(n), np.full(n, 1.0 / n)
    masks = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    kept = masks.sum(axis=1)
    p = spec.keep_prob
    probs = p ** kept * (1.0 - p) ** (n - kept)
    return masks, probs


def exact_expected_output(member_pre_activations: np.ndarray, spec: GroupSpec,
                          kind: str = "relu") -> np.ndarray:
    """Exact E_m[sum_j m_j f(pre_j)] by enumerating every mask: ``(..., k, n) -> (..., k)``."""
    masks, probs = mask_distribution(spec)
    y = T.activation(kind, np.asarray(member_pre_activations, dtype=np.float64))
    per_mask = y @ masks.T
    return (per_mask @ probs).astype(T.get_dtype())


def spawn_generators(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generator streams derived from one run seed.

    Stream ``i`` is ``default_rng(SeedSequence(seed).spawn(count)[i])``, so a
    given (seed, i) pair always yields the same stream.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
