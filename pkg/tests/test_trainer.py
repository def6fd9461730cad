import numpy as np
import pytest

from ditherprop.data import Dataset, synthetic_gaussian_task
from ditherprop.model import BackpropMode, Dense, Network, build, mlp
from ditherprop.trainer import (DivergenceError, MetricsRecord, TrainConfig, apply_update, evaluate,
                                sparsity_summary, train, worst_bitwidth)


def rec(sparsity, bitwidth=None):
    return MetricsRecord(0, 0, 0.0, sparsity, bitwidth or [0] * len(sparsity), 0, 0, 0)


def test_config_validation():
    for bad in (dict(lr=-1), dict(momentum=1.0), dict(weight_decay=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_lr_zero_leaves_weights_unchanged(small_task):
    train_ds, _ = small_task
    net = mlp([12, 8, 3], seed=0)
    before = net.get_state()
    train(net, train_ds, TrainConfig(lr=0.0, epochs=2, batch_size=32,
                                     mode=BackpropMode("dithered", s=2)))
    for p, q in zip(before, net.parameters()):
        np.testing.assert_array_equal(p, q)


def test_momentum_sgd_on_quadratic():
    # f(w) = (w - 3)^2 / 2 through the real update rule, minimum at 3
    layer = Dense(1, 1, relu=False)
    net = Network([layer], (1,))
    layer.W[:] = -2.0
    cfg = TrainConfig(lr=0.1, momentum=0.5, weight_decay=0.0)
    for _ in range(200):
        apply_update(net, [layer.W - 3.0, np.zeros_like(layer.b)], cfg, cfg.lr)
    assert abs(layer.W[0, 0] - 3.0) <= 1e-4


def test_update_rule_by_hand():
    layer = Dense(1, 1, relu=False)
    net = Network([layer], (1,))
    layer.W[:] = 2.0
    layer.b[:] = 1.0
    cfg = TrainConfig(lr=0.5, momentum=0.9, weight_decay=0.1)
    g = [np.array([[1.0]]), np.array([[1.0]])]
    apply_update(net, g, cfg, cfg.lr)
    # v = 1 + 0.1*2 = 1.2 ; W = 2 - 0.6
    assert layer.W[0, 0] == pytest.approx(1.4)
    assert layer.b[0, 0] == pytest.approx(0.5)  # no decay on the bias
    apply_update(net, g, cfg, cfg.lr)
    # v = 0.9*1.2 + 1 + 0.1*1.4 = 2.22
    assert layer.W[0, 0] == pytest.approx(1.4 - 0.5 * 2.22)


def test_lr_decay_schedule():
    cfg = TrainConfig(lr=1.0, lr_decay=(0.5, 2))
    assert [cfg.lr_at(e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]


def test_training_is_bit_reproducible(small_task):
    train_ds, test_ds = small_task
    cfg = TrainConfig(lr=0.05, epochs=2, batch_size=16, mode=BackpropMode("dithered", s=2), seed=4)
    a = train(mlp([12, 10, 3], seed=1), train_ds, cfg, test_ds)
    b = train(mlp([12, 10, 3], seed=1), train_ds, cfg, test_ds)
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        np.testing.assert_array_equal(p, q)
    assert [r.loss for r in a.records] == [r.loss for r in b.records]
    assert [r.sparsity for r in a.records] == [r.sparsity for r in b.records]
    assert a.epoch_accuracy == b.epoch_accuracy


@pytest.mark.parametrize("mode", [BackpropMode("exact"), BackpropMode("dithered", s=2),
                                  BackpropMode("dithered_8bit", s=2), BackpropMode("exact_8bit"),
                                  BackpropMode("meprop", target_sparsity=0.5)])
def test_every_mode_learns_the_easy_task(small_task, mode):
    train_ds, test_ds = small_task
    # meProp drops most of the output-layer gradient and needs a longer budget
    cfg = TrainConfig(lr=0.05, epochs=10 if mode.variant == "meprop" else 3, batch_size=16, mode=mode)
    res = train(mlp([12, 16, 3], seed=0), train_ds, cfg, test_ds)
    assert res.epoch_accuracy[-1] >= 0.9


def test_records_and_counters(small_task):
    train_ds, test_ds = small_task
    seen = []
    cfg = TrainConfig(lr=0.05, epochs=2, batch_size=100, mode=BackpropMode("dithered", s=3))
    res = train(mlp([12, 8, 6, 3], seed=0), train_ds, cfg, test_ds, sink=seen.append)
    assert len(res.records) == 2 * 3  # 256 samples -> batches of 100, 100, 56
    assert seen == res.records
    assert [r.iteration for r in res.records] == list(range(6))
    for r in res.records:
        assert len(r.sparsity) == 3 and all(0 <= s <= 1 for s in r.sparsity)
    macs = [r.macs_performed for r in res.records]
    assert macs == sorted(macs)
    assert all(r.macs_performed <= r.macs_dense_equivalent for r in res.records)
    assert res.records[-1].nsd_overhead_ops == res.nsd_overhead_ops > 0
    assert [r.test_accuracy for r in res.records if r.test_accuracy is not None] == res.epoch_accuracy


def test_max_iterations(small_task):
    res = train(mlp([12, 3]), small_task[0], TrainConfig(epochs=5, batch_size=16), max_iterations=7)
    assert len(res.records) == 7


def test_conv_net_trains_in_dithered_mode():
    ds = synthetic_gaussian_task(64, 36, 2, seed=1, separation=10, noise=0.2)
    spec = {"input_shape": [1, 6, 6], "layers": [{"type": "conv", "out": 4, "kernel": 3, "padding": 1},
                                                {"type": "pool"}, {"type": "dense", "out": 8}]}
    cfg = TrainConfig(lr=0.05, epochs=4, batch_size=8, mode=BackpropMode("dithered", s=2))
    res = train(build(spec, 36, 2), ds, cfg, ds)
    assert res.epoch_accuracy[-1] >= 0.9
    assert all(len(r.sparsity) == 3 for r in res.records)


def test_divergence_raises(small_task):
    net = mlp([12, 3])
    net.weighted[0].W[:] = np.nan
    with pytest.raises(DivergenceError):
        train(net, small_task[0], TrainConfig(epochs=1))


def test_evaluate_examples():
    labels = np.arange(100) % 10
    ds = Dataset(np.random.default_rng(0).random((100, 4)), labels, 10)
    net = mlp([4, 10])
    net.weighted[0].W[:] = 0.0
    net.weighted[0].b[:] = 0.0
    assert evaluate(net, ds) == pytest.approx(0.1)

    one = Dataset(np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([7]), 10)
    net.weighted[0].W[7, 0] = 5.0
    assert evaluate(net, one) == 1.0

    rng = np.random.default_rng(1)
    ds = Dataset(rng.random((20, 4)), rng.integers(0, 10, 20), 10)
    net = mlp([4, 10], seed=3)
    logits = net.forward(ds.images)
    hand = sum(int(np.argmax(logits[:, i]) == ds.labels[i]) for i in range(20)) / 20
    assert evaluate(net, ds, batch_size=7) == hand

    with pytest.raises(ValueError):
        evaluate(net, ds.subset(slice(0, 0)))


def test_sparsity_summary_examples():
    assert sparsity_summary([rec([0.5, 0.5]), rec([0.5, 0.5])])["global"] == 0.5
    assert sparsity_summary([rec([0.2, 0.8])])["global"] == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    rows = rng.random((30, 4))
    s = sparsity_summary([rec(list(r)) for r in rows])
    total = 0.0
    for r in rows:
        for v in r:
            total += v
    assert s["global"] == pytest.approx(total / 120, rel=1e-12)
    for j in range(4):
        assert s["per_layer"][j] == pytest.approx(sum(r[j] for r in rows) / 30, rel=1e-12)
    with pytest.raises(ValueError):
        sparsity_summary([])


def test_worst_bitwidth():
    assert worst_bitwidth([rec([0.1, 0.2], [3, 5]), rec([0.1, 0.2], [7, 2])]) == 7
    assert worst_bitwidth([]) == 0
