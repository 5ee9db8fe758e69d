"""Backbone pretraining and the task bundle: determinism, frozen base, both adapters."""

import numpy as np
import pytest

from metricopt import data as dt
from metricopt import tasks
from metricopt.nn import MLP, MLPSpec


def _snapshot(net):
    payload = [net.param_vector().tobytes()]
    payload += [net.stats[k].tobytes() for k in sorted(net.stats)]
    return b"".join(payload)


def test_pretrain_reduces_loss():
    rng = np.random.default_rng(51)
    x, y = dt.synthetic_binary(400, 8, 0.3, 2.5, rng)
    spec = MLPSpec((8, 20, 8, 1), hidden_slope=0.01, batchnorm=True)
    fresh = tasks.pretrain_base_model(spec, x, y, np.random.default_rng(52), steps=0)
    trained = tasks.pretrain_base_model(spec, x, y, np.random.default_rng(52), steps=200)

    from metricopt import metrics as mt

    def full_loss(net):
        return mt.cross_entropy_from_logits(y, net.forward(x, mode="eval").ravel())[0]

    assert full_loss(trained) < 0.6 * full_loss(fresh)


def test_pretrain_zero_steps_is_fresh_init():
    rng_a = np.random.default_rng(53)
    rng_b = np.random.default_rng(53)
    spec = MLPSpec((4, 6, 1))
    x, y = dt.synthetic_binary(50, 4, 0.4, 1.0, np.random.default_rng(1))
    net = tasks.pretrain_base_model(spec, x, y, rng_a, steps=0)
    ref = MLP(spec, rng_b)
    assert np.array_equal(net.param_vector(), ref.param_vector())


def test_pretrain_deterministic():
    x, y = dt.synthetic_binary(120, 5, 0.3, 2.0, np.random.default_rng(2))
    spec = MLPSpec((5, 10, 1), batchnorm=True)
    a = tasks.pretrain_base_model(spec, x, y, np.random.default_rng(54), steps=80)
    b = tasks.pretrain_base_model(spec, x, y, np.random.default_rng(54), steps=80)
    assert _snapshot(a) == _snapshot(b)


def test_pretrain_pads_adapter_slot_with_zeros():
    rng = np.random.default_rng(55)
    x, y = dt.synthetic_binary(100, 4, 0.3, 2.0, rng)
    spec = MLPSpec((4 + 3, 8, 1))
    net = tasks.pretrain_base_model(spec, x, y, np.random.default_rng(56),
                                    steps=40, adapter_dim=3)
    assert net.spec.layer_sizes[0] == 7  # trained with the phi block zeroed


def test_make_synthetic_task_deterministic_and_consistent():
    t1 = tasks.make_synthetic_task(np.random.default_rng(57), n=250, pretrain_steps=50)
    t2 = tasks.make_synthetic_task(np.random.default_rng(57), n=250, pretrain_steps=50)
    assert _snapshot(t1.base) == _snapshot(t2.base)
    assert np.array_equal(t1.splits.x_test, t2.splits.x_test)
    phi = t1.init_phi(np.random.default_rng(58))
    assert t1.metric_minimized(phi) == t2.metric_minimized(phi)

    from metricopt import metrics as mt

    raw = t1.metric_raw(phi, "val")
    assert 0.0 <= raw <= 1.0
    assert t1.metric_minimized(phi, "val") == mt.to_minimize("mcr", raw)


def test_task_never_writes_the_backbone():
    rng = np.random.default_rng(59)
    task = tasks.make_synthetic_task(rng, n=250, pretrain_steps=50)
    before = _snapshot(task.base)
    phi = task.init_phi(rng)
    for sel in task.batches(16, 5, rng):
        _, dphi = task.loss_grad(phi, sel)
        phi = phi - 0.05 * dphi
    task.metric_raw(phi, "val")
    task.metric_minimized(phi, "test")
    task.loss(phi, "train")
    assert _snapshot(task.base) == before


def test_loss_grad_descends_the_full_loss():
    rng = np.random.default_rng(60)
    task = tasks.make_synthetic_task(rng, n=400, pretrain_steps=30)
    phi = task.init_phi(rng)
    # full-batch gradient step must reduce the full-batch loss for small lr
    full = np.arange(task.splits.y_train.size)
    loss0, g = task.loss_grad(phi, full)
    loss1, _ = task.loss_grad(phi - 1e-3 * g, full)
    assert loss1 < loss0


def test_film_task_end_to_end():
    rng = np.random.default_rng(61)
    task = tasks.make_synthetic_task(
        rng, n=250, pretrain_steps=40, adapter_kind="film", adapter_dim=16,
        film_layer=2, hidden=(20, 12, 8), metric_kind="f_measure")
    assert task.dim == 16
    phi = task.init_phi(rng)
    sel = task.batches(12, 1, rng)[0]
    loss, dphi = task.loss_grad(phi, sel)
    assert np.isfinite(loss) and dphi.shape == (16,)
    m = task.metric_minimized(phi)
    assert 0.0 <= m <= 1.0


def test_task_rejects_bad_metric():
    rng = np.random.default_rng(62)
    with pytest.raises(ValueError):
        tasks.make_synthetic_task(rng, n=250, pretrain_steps=0, metric_kind="auc")


def test_task_from_file_backed_data(tmp_path):
    # libsvm file -> arrays -> task: the a9a-style path end to end
    rng = np.random.default_rng(63)
    lines = []
    for i in range(120):
        label = 1 if i % 4 == 0 else -1
        shift = 1.5 if label == 1 else -1.5
        v = rng.normal(shift, 1.0, size=5)
        feats = " ".join(f"{j + 1}:{v[j]:.5f}" for j in range(5))
        lines.append(f"{label} {feats}")
    path = tmp_path / "tiny.libsvm"
    path.write_text("\n".join(lines) + "\n")
    x, y = dt.load_libsvm(path)
    assert x.shape == (120, 5) and set(y) == {0, 1}
    task = tasks.make_task_from_data(x, y, rng, adapter_dim=6,
                                     hidden=(16, 8), pretrain_steps=30,
                                     batch_size=16)
    phi = task.init_phi(rng)
    sel = task.batches(16, 1, rng)[0]
    loss, dphi = task.loss_grad(phi, sel)
    assert np.isfinite(loss) and dphi.shape == (6,)
    assert 0.0 <= task.metric_minimized(phi, "test") <= 1.0
