"""Deterministic CPU tensor kernels with hand-written vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` values in the module-wide precision.  Every
differentiable operation exists twice: as a pure function (``matmul``,
``conv2d``, ...) and as an op object whose ``forward`` records what its
``backward`` (the VJP) needs.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

_PRECISIONS = {32: np.float32, 64: np.float64}
_dtype = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class OpStateError(RuntimeError):
    """Raised when ``backward`` is called on an op that never ran forward."""


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _PRECISIONS[bits]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits: int):
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _strict():
    return np.errstate(over="raise", invalid="raise", divide="raise")


# ---------------------------------------------------------------------------
# dense

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    with _strict():
        return a @ b


class MatMul:
    def __init__(self):
        self._inputs = None

    def forward(self, a, b):
        out = matmul(a, b)
        self._inputs = (a, b)
        return out

    def backward(self, grad):
        if self._inputs is None:
            raise OpStateError("MatMul.backward called before forward")
        a, b = self._inputs
        return grad @ b.T, a.T @ grad


# ---------------------------------------------------------------------------
# convolution and pooling

def _same_pads(size: int, window: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + window - size, 0)
    # odd remainder goes bottom/right
    return total // 2, total - total // 2


def _pad_spatial(x, padding, kh, kw, stride, fill=0.0):
    if padding == "valid":
        return x, (0, 0, 0, 0)
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    top, bottom = _same_pads(x.shape[2], kh, stride)
    left, right = _same_pads(x.shape[3], kw, stride)
    if top == bottom == left == right == 0:
        return x, (0, 0, 0, 0)
    padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)),
                    constant_values=fill)
    return padded, (top, bottom, left, right)


def _windows(xp, kh, kw, stride):
    """View of shape (B, C, H', W', kh, kw) over the padded input."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _check_kernel(xp_shape, kh, kw, what):
    if kh > xp_shape[2] or kw > xp_shape[3]:
        raise ShapeError(f"{what}: window {kh}x{kw} larger than padded input "
                         f"{xp_shape[2]}x{xp_shape[3]}")


def conv2d(x, filters, stride=1, padding="same"):
    return Conv2D().forward(x, filters, stride, padding)


class Conv2D:
    """Cross-correlation, NCHW input and OIHW filters."""

    def __init__(self):
        self._cache = None

    def forward(self, x, filters, stride=1, padding="same"):
        if x.ndim != 4 or filters.ndim != 4 or x.shape[1] != filters.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with filters {filters.shape}")
        if stride < 1:
            raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
        _, _, kh, kw = filters.shape
        xp, pads = _pad_spatial(x, padding, kh, kw, stride)
        _check_kernel(xp.shape, kh, kw, "conv2d")
        cols = _windows(xp, kh, kw, stride)
        with _strict():
            # (B, H', W', O) -> (B, O, H', W')
            out = np.tensordot(cols, filters, axes=([1, 4, 5], [1, 2, 3]))
        self._cache = (x.shape, xp.shape, pads, cols, filters, stride)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        if self._cache is None:
            raise OpStateError("Conv2D.backward called before forward")
        x_shape, xp_shape, (top, _, left, _), cols, filters, stride = self._cache
        _, _, kh, kw = filters.shape
        ho, wo = grad.shape[2], grad.shape[3]
        dfilters = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        # (B, H', W', C, kh, kw)
        dcols = np.tensordot(grad, filters, axes=([1], [0]))
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a:a + stride * (ho - 1) + 1:stride,
                    b:b + stride * (wo - 1) + 1:stride] += dcols[..., a, b].transpose(0, 3, 1, 2)
        dx = dxp[:, :, top:top + x_shape[2], left:left + x_shape[3]]
        return np.ascontiguousarray(dx), dfilters


def maxpool2d(x, window, stride, padding="same"):
    return MaxPool2D().forward(x, window, stride, padding)


class MaxPool2D:
    def __init__(self):
        self._cache = None

    def forward(self, x, window, stride, padding="same"):
        if window < 1 or stride < 1:
            raise ValueError(f"maxpool2d: window and stride must be positive, got {window}, {stride}")
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
        xp, pads = _pad_spatial(x, padding, window, window, stride, fill=-np.inf)
        _check_kernel(xp.shape, window, window, "maxpool2d")
        wins = _windows(xp, window, window, stride)
        flat = wins.reshape(wins.shape[:4] + (window * window,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, xp.shape, pads, arg, window, stride)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise OpStateError("MaxPool2D.backward called before forward")
        x_shape, xp_shape, (top, _, left, _), arg, window, stride = self._cache
        bsz, ch, ho, wo = grad.shape
        rows = (np.arange(ho) * stride)[None, None, :, None] + arg // window
        cols = (np.arange(wo) * stride)[None, None, None, :] + arg % window
        plane = xp_shape[2] * xp_shape[3]
        offsets = (np.arange(bsz * ch) * plane).reshape(bsz, ch, 1, 1)
        flat_idx = (offsets + rows * xp_shape[3] + cols).ravel()
        dxp = np.bincount(flat_idx, weights=grad.ravel(), minlength=bsz * ch * plane)
        dxp = dxp.astype(grad.dtype).reshape(xp_shape)
        return np.ascontiguousarray(dxp[:, :, top:top + x_shape[2], left:left + x_shape[3]])


def global_avg_pool(x):
    return GlobalAvgPool().forward(x)


class GlobalAvgPool:
    def __init__(self):
        self._shape = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"global_avg_pool: expected (B, C, H, W), got {x.shape}")
        self._shape = x.shape
        return x.sum(axis=(2, 3)) / (x.shape[2] * x.shape[3])

    def backward(self, grad):
        if self._shape is None:
            raise OpStateError("GlobalAvgPool.backward called before forward")
        h, w = self._shape[2:]
        return np.broadcast_to((grad / (h * w))[:, :, None, None], self._shape).copy()


# ---------------------------------------------------------------------------
# activations

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(kind: str, x: np.ndarray, y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """VJP of ``activation`` given its input ``x`` and output ``y``."""
    if kind == "relu":
        return grad * (x > 0)
    if kind == "sigmoid":
        return grad * y * (1 - y)
    if kind == "tanh":
        return grad * (1 - y * y)
    if kind == "linear":
        return grad
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


class Activation:
    def __init__(self, kind: str):
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
        self.kind = kind
        self._cache = None

    def forward(self, x):
        y = activation(self.kind, x)
        self._cache = (x, y)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise OpStateError("Activation.backward called before forward")
        return activation_grad(self.kind, *self._cache, grad)


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits, labels):
    return SoftmaxCrossEntropy().forward(logits, labels)


class SoftmaxCrossEntropy:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""

    def __init__(self):
        self._cache = None

    def forward(self, logits, labels):
        labels = np.asarray(labels)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
        k = logits.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        with _strict():
            lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - lse
        probs = np.exp(log_probs)
        rows = np.arange(logits.shape[0])
        loss = -log_probs[rows, labels].mean()
        self._cache = (probs, labels)
        return float(loss), probs

    def backward(self, grad=1.0):
        if self._cache is None:
            raise OpStateError("SoftmaxCrossEntropy.backward called before forward")
        probs, labels = self._cache
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1
        return d * (grad / len(labels))
