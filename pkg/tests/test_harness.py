import csv
import io
import math

import numpy as np
import pytest

from nodebag import harness
from nodebag.data import Dataset
from nodebag.harness import TrainConfig, build_model, evaluate, train


def toy_mnist(n, seed):
    """Ten classes, each a bright 4x4 block at its own position, plus noise."""
    r = np.random.default_rng(seed)
    labels = r.integers(0, 10, n)
    images = r.random((n, 1, 28, 28)).astype(np.float32) * 0.3
    for i, lab in enumerate(labels):
        row, col = divmod(int(lab), 5)
        images[i, 0, 4 + 8 * row:8 + 8 * row, 2 + 5 * col:6 + 5 * col] += 0.7
    return Dataset(images, labels)


@pytest.fixture(scope="module")
def toy():
    return {"train": toy_mnist(300, 0), "val": toy_mnist(60, 1), "test": toy_mnist(60, 2)}


def fc(**kw):
    cfg = dict(arch="mnist_fc", width=6, group_size=2, method="A", epochs=4, batch_size=32,
               avg_frequency=2, seed=5)
    cfg.update(kw)
    return TrainConfig(**cfg)


def rows_without_time(rows):
    return [r.as_list()[:5] + r.as_list()[6:] for r in rows]


# ---------------------------------------------------------------------------
# config and architectures

def test_config_defaults_resolve():
    assert TrainConfig().resolved().epochs == 30
    c = TrainConfig(arch="cnn_c").resolved()
    assert (c.epochs, c.train_subset, c.lr_schedule) == (20, 10000, "plateau")
    p = TrainConfig(arch="cnn_c", full_scale=True).resolved()
    assert (p.epochs, p.train_subset) == (200, 0)
    assert TrainConfig(full_scale=True).resolved().epochs == 200
    assert TrainConfig().resolved().batch_size == 128


@pytest.mark.parametrize("bad", [dict(arch="vgg"), dict(width=0), dict(epochs=0),
                                 dict(avg_frequency=-1), dict(method="C"),
                                 dict(activation="elu")])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).resolved()


def test_mnist_fc_n1_parameter_count_is_plain_net():
    model = build_model(TrainConfig(width=256, group_size=1))
    plain = 784 * 256 + 256 + 256 * 256 + 256 + 256 * 10 + 10
    assert model.param_count() == plain
    assert build_model(TrainConfig(width=256), plain=True).param_count() == plain


def test_mnist_fc_layout():
    model = build_model(TrainConfig(width=16, group_size=4))
    kinds = [l.kind for l in model.layers]
    assert kinds == ["flatten", "dense_grouped", "dense_grouped", "dense_plain"]
    assert model.layers[1].params["weights"].shape == (16, 4, 784)
    assert model.layers[3].params["weights"].shape == (10, 16)


@pytest.mark.parametrize("mult, widths", [(1.0, [64, 64, 128, 128, 192, 192]),
                                          (0.5, [32, 32, 64, 64, 96, 96])])
def test_cnn_widths(mult, widths):
    assert harness.cnn_widths(mult) == widths
    model = build_model(TrainConfig(arch="cnn_c", width=mult, group_size=2))
    convs = [l for l in model.layers if l.kind.startswith("conv")]
    assert [l.params["weights"].shape[0] for l in convs] == widths
    assert [l.kind for l in convs] == ["conv_grouped"] * 5 + ["conv_plain"]
    assert convs[4].padding == "valid" and convs[5].params["weights"].shape[-1] == 1


def test_cnn_final_maps_are_6x6():
    model = build_model(TrainConfig(arch="cnn_c", width=0.1, group_size=1, method="B"))
    x = np.zeros((1, 3, 32, 32), np.float32)
    for layer in model.layers[:7]:
        x = layer.forward(x, None if not layer.grouped else np.ones((1, layer.spec.group_count, 1)))
    assert x.shape[-2:] == (6, 6)
    assert model.combined().forward(np.zeros((2, 3, 32, 32), np.float32)).shape == (2, 10)


def test_unknown_arch():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_model(TrainConfig(arch="resnet"))


# ---------------------------------------------------------------------------
# training

def test_method_b_single_member_trace_equals_plain(toy):
    cfg = fc(method="B", group_size=1)
    grouped, rows_g = train(cfg, toy)
    plain, rows_p = train(cfg, toy, model=build_model(cfg.resolved(), plain=True))
    assert rows_without_time(rows_g) == rows_without_time(rows_p)
    pg, pp = dict(grouped.combined().parameters()), dict(plain.parameters())
    assert all(np.array_equal(pg[k], pp[k]) for k in pp)


def test_training_is_deterministic(toy):
    a = train(fc(), toy)[1]
    b = train(fc(), toy)[1]
    assert rows_without_time(a) == rows_without_time(b)
    c = train(fc(seed=6), toy)[1]
    assert rows_without_time(a) != rows_without_time(c)


@pytest.mark.parametrize("epochs, freq", [(5, 2), (4, 4), (3, 1), (4, 0), (3, 5)])
def test_averaging_count(toy, epochs, freq):
    _, rows = train(fc(epochs=epochs, avg_frequency=freq), toy)
    expected = 0 if freq == 0 else math.floor(epochs / freq)
    assert sum(r.averaged for r in rows) == expected


def test_frequency_equal_to_epochs_never_fires_mid_run(toy):
    _, rows = train(fc(epochs=4, avg_frequency=4), toy)
    assert [r.averaged for r in rows] == [False, False, False, True]


def test_members_identical_after_averaging(toy):
    model, _ = train(fc(epochs=4, avg_frequency=2, group_size=3), toy)
    for _, layer in model.grouped_layers:
        for j in range(1, 3):
            assert np.array_equal(layer.params["weights"][:, 0], layer.params["weights"][:, j])
            assert np.array_equal(layer.params["biases"][:, 0], layer.params["biases"][:, j])


def test_members_differ_without_averaging(toy):
    model, _ = train(fc(epochs=2, avg_frequency=0, group_size=3), toy)
    layer = model.layers[1]
    assert not np.array_equal(layer.params["weights"][:, 0], layer.params["weights"][:, 1])


def test_metrics_rows(toy):
    _, rows = train(fc(width=32, epochs=10), toy)
    assert [r.epoch for r in rows] == list(range(1, 11))
    for r in rows:
        assert 0 <= r.train_error <= 1 and 0 <= r.val_error <= 1 and 0 <= r.test_error <= 1
    assert [r.lr for r in rows] == [1e-3] * 5 + [1e-4] * 5
    assert rows[-1].test_error < 0.5  # the toy task is learnable


def test_test_set_does_not_influence_training(toy):
    other = dict(toy, test=toy_mnist(60, 99))
    a, ra = train(fc(lr_schedule="plateau", plateau_patience=1), toy)
    b, rb = train(fc(lr_schedule="plateau", plateau_patience=1), other)
    assert [r.val_error for r in ra] == [r.val_error for r in rb]
    assert [r.lr for r in ra] == [r.lr for r in rb]
    pa, pb = dict(a.parameters()), dict(b.parameters())
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_divergence_reports_epoch_and_batch(toy):
    bad = toy_mnist(64, 3)
    bad.images[40] = np.inf
    with pytest.raises(harness.TrainingDivergedError) as info:
        train(fc(batch_size=16, epochs=1), dict(toy, train=bad))
    assert info.value.epoch == 0 and 0 <= info.value.batch < 4


def test_metrics_csv_header_and_config_comments(toy):
    cfg = fc(epochs=2).resolved()
    _, rows = train(cfg, toy)
    text = harness.metrics_csv(rows, cfg)
    comments = [l for l in text.splitlines() if l.startswith("#")]
    assert "# seed=5" in comments and "# epochs=2" in comments
    body = [l for l in text.splitlines() if not l.startswith("#")]
    table = list(csv.reader(io.StringIO("\n".join(body))))
    assert table[0] == harness.METRICS_HEADER and len(table) == 3


# ---------------------------------------------------------------------------
# evaluation

def test_constant_label_model_has_zero_error():
    model = build_model(TrainConfig(width=4, group_size=2))
    head = model.layers[-1]
    head.params["weights"][:] = 0
    head.params["biases"][:] = 0
    head.params["biases"][7] = 1
    ds = Dataset(np.random.default_rng(0).random((50, 1, 28, 28)), np.full(50, 7))
    for mode in harness.EVAL_MODES:
        assert evaluate(model, ds, mode) == 0.0


def test_b_single_member_combined_equals_single_member(toy):
    model, _ = train(fc(method="B", group_size=1, epochs=2), toy)
    ds = toy["test"]
    comb = harness.predict(model, ds.images, "combined")
    single = harness.predict(model, ds.images, "single-member")
    assert np.array_equal(comb, single)
    np.testing.assert_array_equal(model.combined().forward(ds.images),
                                  model.single_member().forward(ds.images))


def test_expected_mode_enumeration_limit():
    model = build_model(TrainConfig(width=2, group_size=21))
    ds = Dataset(np.zeros((2, 1, 28, 28)), np.zeros(2, int))
    with pytest.raises(harness.bagging.EnumerationError):
        evaluate(model, ds, "expected")


def test_unknown_mode():
    with pytest.raises(ValueError):
        evaluate(build_model(TrainConfig(width=2)), toy_mnist(3, 0), "mean")


def test_error_in_unit_interval(toy):
    model = build_model(fc().resolved())
    for mode in harness.EVAL_MODES:
        assert 0 <= evaluate(model, toy["test"], mode) <= 1


# ---------------------------------------------------------------------------
# sweep

def test_sweep_grid_rows_and_compression(toy):
    base = fc(epochs=1, width=16)
    grid = harness.make_grid(base, group_sizes=[1, 2, 4], seeds=[1, 2, 3])
    assert len(grid) == 9
    rows = harness.run_sweep(grid, datasets=toy)
    assert len(rows) == 9 and all(r["status"] == "ok" for r in rows)
    assert [(r["group_size"], r["seed"]) for r in rows] == \
        [(n, s) for n in (1, 2, 4) for s in (1, 2, 3)]
    for r in rows:
        n = r["group_size"]
        grouped_layers = 16 * n * 785 + 16 * n * 17
        other = 16 * 10 + 10
        assert r["grouped_params"] == grouped_layers + other
        assert r["combined_params"] == grouped_layers // n + other
    text = harness.sweep_csv(rows)
    assert text.splitlines()[0].split(",") == harness.SWEEP_HEADER


def test_sweep_records_failed_run(toy):
    bad = dict(toy, train=toy_mnist(32, 3))
    bad["train"].images[3] = np.inf
    rows = harness.run_sweep([fc(epochs=1)], datasets=bad)
    assert rows[0]["status"].startswith("error: TrainingDivergedError")
    assert rows[0]["final_test_error"] == ""


def test_sweep_continues_after_failure(tmp_path):
    # missing data directory: every run fails but the sweep still returns rows
    grid = harness.make_grid(fc(epochs=1, data_dir=str(tmp_path)), seeds=[1, 2])
    rows = harness.run_sweep(grid)
    assert len(rows) == 2 and all(r["status"].startswith("error: FileNotFoundError") for r in rows)


def test_sweep_parallel_matches_sequential(tmp_path, mnist_dir):
    grid = harness.make_grid(fc(epochs=1, width=4, data_dir=str(mnist_dir), train_subset=500,
                                test_subset=200), seeds=[1, 2])
    seq = harness.run_sweep(grid, workers=1)
    par = harness.run_sweep(grid, workers=2)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows]
    assert strip(seq) == strip(par)
