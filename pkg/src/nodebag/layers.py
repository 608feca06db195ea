"""Plain and grouped layers, chained into a ``Model``.

Every layer exposes ``params`` (name -> array), ``grads`` (filled by
``backward``), ``forward(x, mask=None)`` and ``backward(grad) -> input grad``.
Grouped layers need a mask of shape ``(batch, k, n)`` in ``forward``; plain
layers ignore it.
"""
from __future__ import annotations

import math

import numpy as np

from . import bagging
from . import tensor as T
from .bagging import GroupSpec


def init_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _uniform(rng, limit, shape):
    return rng.uniform(-limit, limit, size=shape).astype(T.get_dtype())


class Layer:
    grouped = False
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, mask=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def config(self) -> dict:
        """Hyperparameters needed to rebuild the layer (everything except params)."""
        return {}

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def _need_forward(self):
        if getattr(self, "_cache", None) is None:
            raise T.OpStateError(f"{type(self).__name__}.backward called before forward")


# ---------------------------------------------------------------------------
# dense

class DensePlain(Layer):
    kind = "dense_plain"

    def __init__(self, weights, biases, activation="relu"):
        super().__init__()
        self.params = {"weights": T.as_tensor(weights), "biases": T.as_tensor(biases)}
        self.activation = activation
        self._cache = None

    @classmethod
    def init(cls, fan_in, units, rng, activation="relu"):
        w = _uniform(rng, init_limit(fan_in, units), (units, fan_in))
        return cls(w, np.zeros(units, dtype=T.get_dtype()), activation)

    def config(self):
        return {"activation": self.activation}

    def forward(self, x, mask=None):
        w, b = self.params["weights"], self.params["biases"]
        pre = T.matmul(x, w.T) + b
        y = T.activation(self.activation, pre)
        self._cache = (x, pre, y)
        return y

    def backward(self, grad):
        self._need_forward()
        x, pre, y = self._cache
        gpre = T.activation_grad(self.activation, pre, y, grad)
        self.grads = {"weights": gpre.T @ x, "biases": gpre.sum(axis=0)}
        return gpre @ self.params["weights"]


class DenseGrouped(Layer):
    """``k`` groups of ``n`` dense member nodes; weights ``(k, n, fan_in)``."""

    grouped = True
    kind = "dense_grouped"

    def __init__(self, spec: GroupSpec, weights, biases, activation="relu"):
        super().__init__()
        weights, biases = T.as_tensor(weights), T.as_tensor(biases)
        if weights.shape[:2] != (spec.group_count, spec.group_size) or \
                biases.shape != (spec.group_count, spec.group_size):
            raise T.ShapeError(f"DenseGrouped: weights {weights.shape} / biases {biases.shape} "
                               f"do not match {spec}")
        self.spec = spec
        self.params = {"weights": weights, "biases": biases}
        self.activation = activation
        self._cache = None

    @classmethod
    def init(cls, fan_in, spec: GroupSpec, rng, activation="relu"):
        k, n = spec.group_count, spec.group_size
        # one draw per group, replicated over its members
        w = _uniform(rng, init_limit(fan_in, k), (k, fan_in))
        w = np.repeat(w[:, None], n, axis=1)
        return cls(spec, w, np.zeros((k, n), dtype=T.get_dtype()), activation)

    def config(self):
        return {"activation": self.activation, "spec": self.spec.as_dict()}

    def pre_activations(self, x):
        k, n = self.spec.group_count, self.spec.group_size
        w = self.params["weights"].reshape(k * n, -1)
        pre = T.matmul(x, w.T) + self.params["biases"].reshape(k * n)
        return pre.reshape(x.shape[0], k, n)

    def forward(self, x, mask=None):
        if mask is None:
            raise ValueError("grouped layers need a mask in forward; combine the layer for inference")
        bagging.check_mask(mask, self.spec, x.shape[0])
        pre = self.pre_activations(x)
        y = T.activation(self.activation, pre)
        self._cache = (x, pre, y, mask)
        return bagging.group_reduce(y, mask)

    def backward(self, grad):
        self._need_forward()
        x, pre, y, mask = self._cache
        k, n = self.spec.group_count, self.spec.group_size
        gy = grad[:, :, None] * mask
        gpre = T.activation_grad(self.activation, pre, y, gy).reshape(x.shape[0], k * n)
        self.grads = {"weights": (gpre.T @ x).reshape(k, n, -1),
                      "biases": gpre.sum(axis=0).reshape(k, n)}
        return gpre @ self.params["weights"].reshape(k * n, -1)


# ---------------------------------------------------------------------------
# convolution

class ConvPlain(Layer):
    kind = "conv_plain"

    def __init__(self, filters, biases, stride=1, padding="same", activation="relu"):
        super().__init__()
        self.params = {"weights": T.as_tensor(filters), "biases": T.as_tensor(biases)}
        self.stride, self.padding, self.activation = stride, padding, activation
        self._cache = None

    @classmethod
    def init(cls, in_channels, out_channels, kernel, rng, stride=1, padding="same",
             activation="relu"):
        fan_in = in_channels * kernel * kernel
        f = _uniform(rng, init_limit(fan_in, out_channels),
                     (out_channels, in_channels, kernel, kernel))
        return cls(f, np.zeros(out_channels, dtype=T.get_dtype()), stride, padding, activation)

    def config(self):
        return {"activation": self.activation, "stride": self.stride, "padding": self.padding}

    def forward(self, x, mask=None):
        conv = T.Conv2D()
        pre = conv.forward(x, self.params["weights"], self.stride, self.padding)
        pre = pre + self.params["biases"][None, :, None, None]
        y = T.activation(self.activation, pre)
        self._cache = (conv, pre, y)
        return y

    def backward(self, grad):
        self._need_forward()
        conv, pre, y = self._cache
        gpre = T.activation_grad(self.activation, pre, y, grad)
        dx, dw = conv.backward(gpre)
        self.grads = {"weights": dw, "biases": gpre.sum(axis=(0, 2, 3))}
        return dx


class ConvGrouped(Layer):
    """``k`` groups of ``n`` member filters; filters ``(k, n, C, kh, kw)``.

    A mask entry gates its member's whole feature map for that sample.
    """

    grouped = True
    kind = "conv_grouped"

    def __init__(self, spec: GroupSpec, filters, biases, stride=1, padding="same",
                 activation="relu"):
        super().__init__()
        filters, biases = T.as_tensor(filters), T.as_tensor(biases)
        if filters.ndim != 5 or filters.shape[:2] != (spec.group_count, spec.group_size) or \
                biases.shape != (spec.group_count, spec.group_size):
            raise T.ShapeError(f"ConvGrouped: filters {filters.shape} / biases {biases.shape} "
                               f"do not match {spec}")
        self.spec = spec
        self.params = {"weights": filters, "biases": biases}
        self.stride, self.padding, self.activation = stride, padding, activation
        self._cache = None

    @classmethod
    def init(cls, in_channels, spec: GroupSpec, kernel, rng, stride=1, padding="same",
             activation="relu"):
        k, n = spec.group_count, spec.group_size
        fan_in = in_channels * kernel * kernel
        f = _uniform(rng, init_limit(fan_in, k), (k, in_channels, kernel, kernel))
        f = np.repeat(f[:, None], n, axis=1)
        return cls(spec, f, np.zeros((k, n), dtype=T.get_dtype()), stride, padding, activation)

    def config(self):
        return {"activation": self.activation, "stride": self.stride, "padding": self.padding,
                "spec": self.spec.as_dict()}

    def _flat_filters(self):
        f = self.params["weights"]
        return f.reshape((-1,) + f.shape[2:])

    def pre_activations(self, x, conv=None):
        k, n = self.spec.group_count, self.spec.group_size
        conv = conv or T.Conv2D()
        pre = conv.forward(x, self._flat_filters(), self.stride, self.padding)
        pre = pre + self.params["biases"].reshape(k * n)[None, :, None, None]
        return pre.reshape((x.shape[0], k, n) + pre.shape[2:])

    def forward(self, x, mask=None):
        if mask is None:
            raise ValueError("grouped layers need a mask in forward; combine the layer for inference")
        bagging.check_mask(mask, self.spec, x.shape[0])
        conv = T.Conv2D()
        pre = self.pre_activations(x, conv)
        y = T.activation(self.activation, pre)
        self._cache = (conv, pre, y, mask)
        return bagging.group_reduce(y, mask)

    def backward(self, grad):
        self._need_forward()
        conv, pre, y, mask = self._cache
        k, n = self.spec.group_count, self.spec.group_size
        gy = grad[:, :, None] * mask[:, :, :, None, None]
        gpre = T.activation_grad(self.activation, pre, y, gy)
        gpre = gpre.reshape((gpre.shape[0], k * n) + gpre.shape[3:])
        dx, dw = conv.backward(gpre)
        self.grads = {"weights": dw.reshape(self.params["weights"].shape),
                      "biases": gpre.sum(axis=(0, 2, 3)).reshape(k, n)}
        return dx


# ---------------------------------------------------------------------------
# parameter-free layers

class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window=3, stride=2, padding="same"):
        super().__init__()
        self.window, self.stride, self.padding = window, stride, padding
        self._cache = None

    def config(self):
        return {"window": self.window, "stride": self.stride, "padding": self.padding}

    def forward(self, x, mask=None):
        self._cache = T.MaxPool2D()
        return self._cache.forward(x, self.window, self.stride, self.padding)

    def backward(self, grad):
        self._need_forward()
        return self._cache.backward(grad)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, mask=None):
        self._cache = T.GlobalAvgPool()
        return self._cache.forward(x)

    def backward(self, grad):
        self._need_forward()
        return self._cache.backward(grad)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, mask=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        self._need_forward()
        return grad.reshape(self._cache)


LAYER_KINDS = {cls.kind: cls for cls in
               (DensePlain, DenseGrouped, ConvPlain, ConvGrouped, MaxPool, GlobalAvgPool, Flatten)}


# ---------------------------------------------------------------------------
# layer-level operations

def init_grouped(fan_in, spec: GroupSpec, rng, kernel=None, **kwargs):
    """Grouped dense layer, or grouped conv when ``kernel`` is given (``fan_in`` = channels)."""
    if kernel is None:
        return DenseGrouped.init(fan_in, spec, rng, **kwargs)
    return ConvGrouped.init(fan_in, spec, kernel, rng, **kwargs)


def forward_train(layer, x, mask):
    return layer.forward(x, mask)


def backward_train(layer, grad):
    dx = layer.backward(grad)
    return layer.grads, dx


def combine_layer(layer):
    """Inference form of a grouped layer: one node (or filter) per group."""
    w, b = bagging.combine_group(layer.params["weights"], layer.params["biases"], layer.spec)
    if isinstance(layer, DenseGrouped):
        return DensePlain(w, b, layer.activation)
    return ConvPlain(w, b, layer.stride, layer.padding, layer.activation)


def single_member_layer(layer, member=0):
    """Plain layer built from one member per group, scaled by ``n * E[m]``.

    Agrees with ``combine_layer`` whenever the members of each group are identical.
    """
    scale = layer.spec.group_size * bagging.expected_keep(layer.spec)
    w = layer.params["weights"][:, member]
    b = layer.params["biases"][:, member]
    if scale != 1.0:
        w, b = scale * w, scale * b
    if isinstance(layer, DenseGrouped):
        return DensePlain(w, b, layer.activation)
    return ConvPlain(w, b, layer.stride, layer.padding, layer.activation)


def expected_forward(layer, x):
    """Exact mask expectation of a grouped layer's output for input ``x``."""
    pre = layer.pre_activations(x)
    if pre.ndim == 5:
        # per pixel: (B, k, n, H, W) -> (B, H, W, k, n)
        out = bagging.exact_expected_output(pre.transpose(0, 3, 4, 1, 2), layer.spec,
                                            layer.activation)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return bagging.exact_expected_output(pre, layer.spec, layer.activation)


def average_layer(layer) -> None:
    layer.params["weights"], layer.params["biases"] = bagging.weight_average(
        layer.params["weights"], layer.params["biases"])


# ---------------------------------------------------------------------------
# model

class Model:
    """Linear chain of layers ending in logits."""

    def __init__(self, layers, arch=None):
        self.layers = list(layers)
        self.arch = dict(arch or {})

    @property
    def grouped_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if l.grouped]

    def sample_masks(self, batch, rng):
        return {i: bagging.sample_mask(l.spec, batch, rng) for i, l in self.grouped_layers}

    def forward(self, x, masks=None):
        masks = masks or {}
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, masks.get(i))
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        """(key, array) pairs with keys ``"<layer>.<name>"``."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", p

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def grouped_param_count(self) -> int:
        return sum(l.param_count() for _, l in self.grouped_layers)

    def combined(self) -> "Model":
        layers = [combine_layer(l) if l.grouped else l for l in self.layers]
        return Model(layers, self.arch)

    def single_member(self, member=0) -> "Model":
        layers = [single_member_layer(l, member) if l.grouped else l for l in self.layers]
        return Model(layers, self.arch)

    def forward_expected(self, x):
        for layer in self.layers:
            x = expected_forward(layer, x) if layer.grouped else layer.forward(x)
        return x

    def average(self) -> None:
        for _, layer in self.grouped_layers:
            average_layer(layer)
