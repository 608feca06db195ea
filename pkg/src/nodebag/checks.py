"""Self-check oracles run by ``nodebag check``.

Each check returns ``(passed, detail)``.  All numeric checks run in 64-bit.
"""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import bagging, layers, model_io
from . import tensor as T
from .bagging import GroupSpec

GRAD_RTOL = 1e-5
FD_STEP = 1e-5


def numeric_grad(f, x, step=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def _layer_grad_error(layer, x, mask, rng):
    """Worst relative error over input and parameter gradients of sum(out * r)."""
    out = layer.forward(x, mask)
    r = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x, mask) * r))

    layer.forward(x, mask)
    dx = layer.backward(r)
    grads = dict(layer.grads)
    errs = [rel_error(dx, numeric_grad(loss, x))]
    for name, p in layer.params.items():
        errs.append(rel_error(grads[name], numeric_grad(loss, p)))
    return max(errs)


def _away_from_kinks(layer, x):
    if getattr(layer, "activation", None) != "relu" or not layer.grouped:
        return True
    return np.min(np.abs(layer.pre_activations(x))) > 1e-4


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    worst = {}
    with T.precision(64):
        spec_a = GroupSpec(3, 2, "A", 0.5)
        spec_b = GroupSpec(2, 3, "B")
        cases = {
            "dense_plain": lambda: (layers.DensePlain.init(5, 4, rng, "tanh"),
                                    rng.standard_normal((3, 5)), None),
            "dense_grouped_A": lambda: (layers.DenseGrouped(spec_a, rng.standard_normal((3, 2, 5)),
                                                            rng.standard_normal((3, 2)), "relu"),
                                        rng.standard_normal((4, 5)),
                                        bagging.sample_mask(spec_a, 4, rng)),
            "dense_grouped_B": lambda: (layers.DenseGrouped(spec_b, rng.standard_normal((2, 3, 5)),
                                                            rng.standard_normal((2, 3)), "sigmoid"),
                                        rng.standard_normal((4, 5)),
                                        bagging.sample_mask(spec_b, 4, rng)),
            "conv_plain": lambda: (layers.ConvPlain(rng.standard_normal((3, 2, 3, 3)),
                                                    rng.standard_normal(3), 1, "same", "tanh"),
                                   rng.standard_normal((2, 2, 5, 5)), None),
            "conv_grouped": lambda: (layers.ConvGrouped(spec_a, rng.standard_normal((3, 2, 2, 3, 3)),
                                                        rng.standard_normal((3, 2)), 1, "valid",
                                                        "tanh"),
                                     rng.standard_normal((2, 2, 5, 5)),
                                     bagging.sample_mask(spec_a, 2, rng)),
            "maxpool": lambda: (layers.MaxPool(3, 2), rng.standard_normal((2, 2, 5, 5)), None),
            "global_avg_pool": lambda: (layers.GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4)), None),
        }
        for name, make in cases.items():
            layer, x, mask = make()
            while not _away_from_kinks(layer, x):
                layer, x, mask = make()
            worst[name] = _layer_grad_error(layer, x, mask, rng)

        logits = rng.standard_normal((4, 6))
        labels = rng.integers(0, 6, 4)
        op = T.SoftmaxCrossEntropy()
        op.forward(logits, labels)
        analytic = op.backward()
        numeric = numeric_grad(lambda: T.softmax_cross_entropy(logits, labels)[0], logits)
        worst["softmax_cross_entropy"] = rel_error(analytic, numeric)
    bad = {k: v for k, v in worst.items() if not v < GRAD_RTOL}
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return not bad, detail


def check_combination(trials=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.precision(64):
        for t in range(trials):
            k, n = rng.integers(1, 5), rng.integers(1, 5)
            spec = GroupSpec(int(k), int(n), "AB"[t % 2], 0.5)
            fan_in = int(rng.integers(2, 6))
            x = rng.uniform(0.1, 1.0, (1, fan_in))
            w = rng.uniform(0.1, 1.0, (k, n, fan_in))
            b = rng.uniform(0.1, 1.0, (k, n))
            grouped = layers.DenseGrouped(spec, w, b, "relu")
            combined = layers.combine_layer(grouped).forward(x)
            expected = bagging.exact_expected_output(grouped.pre_activations(x), spec, "relu")
            worst = max(worst, float(np.max(np.abs(combined - expected) / np.abs(expected))))
    return worst < 1e-6, f"max relative deviation {worst:.1e} over {trials} layers"


def check_averaging(seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 4, 5)).astype(np.float32)
    b = rng.standard_normal((3, 4)).astype(np.float32)
    w1, b1 = bagging.weight_average(w, b)
    w2, b2 = bagging.weight_average(w1, b1)
    idempotent = np.array_equal(w1, w2) and np.array_equal(b1, b2)
    identical = all(np.array_equal(w1[:, 0], w1[:, j]) for j in range(4))
    spec = GroupSpec(3, 4, "B")
    layer = layers.DenseGrouped(spec, w1, b1)
    x = rng.standard_normal((6, 5)).astype(np.float32)
    outs = [layer.forward(x, bagging.sample_mask(spec, 6, rng)) for _ in range(3)]
    mask_free = all(np.array_equal(outs[0], o) for o in outs)
    ok = idempotent and identical and mask_free
    return ok, f"idempotent={idempotent} members_identical={identical} B_mask_independent={mask_free}"


def check_degenerate(seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 1, 6)).astype(np.float32)
    b = rng.standard_normal((4, 1)).astype(np.float32)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    plain = layers.DensePlain(w[:, 0], b[:, 0])
    ref = plain.forward(x)
    spec_a = GroupSpec(4, 1, "A", 0.5)
    mask = bagging.sample_mask(spec_a, 5, rng)
    dropout_ok = np.array_equal(layers.DenseGrouped(spec_a, w, b).forward(x, mask), ref * mask[:, :, 0])
    spec_b = GroupSpec(4, 1, "B")
    plain_ok = np.array_equal(
        layers.DenseGrouped(spec_b, w, b).forward(x, bagging.sample_mask(spec_b, 5, rng)), ref)
    return dropout_ok and plain_ok, f"A(n=1)==dropout {dropout_ok}, B(n=1)==plain {plain_ok}"


def check_round_trip(seed=0):
    rng = np.random.default_rng(seed)
    spec = GroupSpec(3, 2, "A", 0.5)
    with T.precision(32):
        model = layers.Model([layers.Flatten(), layers.DenseGrouped.init(4, spec, rng),
                              layers.DensePlain.init(3, 2, rng, "linear")], {"arch": "check"})
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.nbm"
            model_io.save_model(model, path)
            loaded = model_io.load_model(path)
            first = path.read_bytes()
            model_io.save_model(loaded, path)
            canonical = first == path.read_bytes()
    same = all(np.array_equal(a, b) for (_, a), (_, b) in zip(model.parameters(), loaded.parameters()))
    return same and canonical, f"bit-identical={same} canonical_bytes={canonical}"


CHECKS = {
    "gradients": check_gradients,
    "combination_fidelity": check_combination,
    "weight_averaging": check_averaging,
    "degenerate_equivalence": check_degenerate,
    "model_round_trip": check_round_trip,
}


def run_checks(out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        passed, detail = fn()
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return ok
