import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from metricopt import learned_opt as lo
from metricopt import toy
from metricopt.nn import DivergenceError
from metricopt.tasks import make_synthetic_task
from metricopt.value_function import ValueFunction


def _zeroed_optimizer(out_bias=None):
    opt = lo.LearnedOptimizer(np.random.default_rng(0))
    for k in opt.net.params:
        opt.net.params[k][:] = 0.0
    if out_bias is not None:
        last = opt.net.spec.n_layers - 1
        opt.net.params[f"b{last}"][:] = out_bias
    return opt


# ---------------------------------------------------------------- features

def test_feature_matrix_layout_and_broadcast():
    rng = np.random.default_rng(3)
    phi = rng.standard_normal(5)
    grad = rng.standard_normal(5)
    feats, avg = lo.opt_features(phi, grad, 0.62, 0.31, None)
    assert feats.shape == (5, lo.N_FEATURES)
    assert_array_equal(feats[:, 0], grad)
    assert_array_equal(feats[:, 1], grad)      # average starts at step-1 value
    assert_array_equal(feats[:, 2], phi)
    # scalar features are broadcast: constant down each column
    for col, want in ((3, 0.62), (4, 0.0), (5, 0.31), (6, 0.0)):
        assert_array_equal(feats[:, col], np.full(5, want))


def test_running_averages_roll_between_steps():
    phi = np.zeros(2)
    g1 = np.array([1.0, -2.0])
    g2 = np.array([3.0, 1.0])
    _, avg = lo.opt_features(phi, g1, 0.5, 0.2, None)
    feats2, _ = lo.opt_features(phi, g2, 0.8, 0.1, avg)
    d = lo.EMA_DECAY
    # after one fold the average is still the step-1 value
    assert_allclose(feats2[:, 1], d * g1 + (1 - d) * g1, rtol=1e-15)
    assert_allclose(feats2[0, 4], 0.8 - (d * 0.5 + (1 - d) * 0.5), rtol=1e-12)
    assert_allclose(feats2[0, 6], 0.1 - (d * 0.2 + (1 - d) * 0.2), rtol=1e-12)


def test_zero_weights_leave_parameters_unchanged():
    opt = _zeroed_optimizer()
    phi = np.array([0.4, -1.2, 0.05])
    feats, _ = lo.opt_features(phi, np.ones(3), 0.5, 0.5, None)
    new_phi, alpha, u = lo.learned_opt_step(opt, phi, feats)
    assert alpha == lo.ALPHA_BASE            # exp(0) exactly
    assert_array_equal(u, np.zeros(3))
    assert_array_equal(new_phi, phi)


def test_step_scale_comes_from_mean_log_output():
    opt = _zeroed_optimizer(out_bias=[0.3, 0.7])
    phi = np.array([1.0, 2.0])
    feats, _ = lo.opt_features(phi, np.zeros(2), 0.1, 0.1, None)
    new_phi, alpha, u = lo.learned_opt_step(opt, phi, feats)
    assert_allclose(alpha, 1e-3 * math.exp(0.7), rtol=1e-15)
    assert_allclose(u, [0.3, 0.3], rtol=1e-15)
    assert_allclose(new_phi, phi + alpha * 0.3, rtol=1e-15)


# ----------------------------------------------------------------- unroll

def test_unroll_shapes_start_and_determinism():
    task = toy.ToyMismatchTask()
    vf = toy.QuadraticBowl()
    opt = lo.LearnedOptimizer(np.random.default_rng(1))
    phis, losses = lo.unroll_learned_opt(task, opt, vf,
                                         np.random.default_rng(5), steps=6)
    assert phis.shape == (7, 2) and losses.shape == (7,)
    assert_array_equal(phis[0], task.init_phi(np.random.default_rng(5)))
    assert losses[0] == task.loss(phis[0])
    again, _ = lo.unroll_learned_opt(task, opt, vf,
                                     np.random.default_rng(5), steps=6)
    assert_array_equal(phis, again)


def test_unroll_aborts_runaway_trajectories():
    opt = _zeroed_optimizer(out_bias=[1e9, 10.0])  # huge direction, big step
    with pytest.raises(DivergenceError):
        lo.unroll_learned_opt(toy.ToyMismatchTask(), opt, toy.QuadraticBowl(),
                              np.random.default_rng(0), steps=4)


# -------------------------------------------------------------- objective

class _FixedPredictions:
    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, phis, mode="eval"):
        assert np.atleast_2d(phis).shape[0] == self.values.size
        return self.values.copy()


def test_objective_matches_hand_computation():
    m = [0.5, 0.4, 0.6, 0.3]
    losses = np.array([1.0, 0.8, 0.9, 0.7])
    phis = np.zeros((4, 2))
    beta = 1.5  # T/2 with T = 3
    margins = [beta * (0.4 - 0.5) / 0.4,   # best prior 0.5
               beta * (0.6 - 0.4) / 0.6,   # best prior 0.4
               beta * (0.3 - 0.4) / 0.3]
    want_metric = sum(math.log1p(math.exp(x)) for x in margins) / 3.0
    want_loss = sum(math.log(l + 1e-8) - math.log(1.0 + 1e-8)
                    for l in losses[1:]) / 3.0
    total, parts = lo.loss_learned_optimizer(phis, losses, _FixedPredictions(m))
    assert_allclose(parts["metric"], want_metric, rtol=1e-12)
    assert_allclose(parts["loss"], want_loss, rtol=1e-12)
    assert_allclose(total, lo.METRIC_WEIGHT * want_metric + want_loss,
                    rtol=1e-12)


def test_objective_flat_trajectory_identities():
    # equal predictions: every margin is 0, so every term is ln 2 exactly;
    # constant loss: the log-ratio term vanishes
    n = 6
    phis = np.zeros((n, 3))
    losses = np.full(n, 0.37)
    total, parts = lo.loss_learned_optimizer(
        phis, losses, _FixedPredictions(np.full(n, 0.3)))
    assert_allclose(parts["metric"], math.log(2.0), rtol=1e-15)
    assert parts["loss"] == 0.0
    assert_allclose(total, lo.METRIC_WEIGHT * math.log(2.0), rtol=1e-15)


def test_objective_improvement_scores_below_ln2():
    n = 6
    phis = np.zeros((n, 2))
    improving = np.linspace(0.6, 0.2, n)
    total, parts = lo.loss_learned_optimizer(
        phis, np.ones(n), _FixedPredictions(improving))
    assert parts["metric"] < math.log(2.0)
    worsening = np.linspace(0.2, 0.6, n)
    _, worse = lo.loss_learned_optimizer(
        phis, np.ones(n), _FixedPredictions(worsening))
    assert worse["metric"] > math.log(2.0)


def test_objective_floors_tiny_predictions():
    m = np.array([0.5, 0.0, -0.2, 1e-9])
    phis = np.zeros((4, 2))
    total, parts = lo.loss_learned_optimizer(phis, np.ones(4),
                                             _FixedPredictions(m))
    assert np.isfinite(total)
    floored = np.maximum(m, lo.M_FLOOR)
    beta = 1.5
    margins = [beta * (floored[1] - 0.5) / floored[1],
               beta * (floored[2] - floored[1]) / floored[2],
               beta * (floored[3] - floored[1]) / floored[3]]
    want = sum(math.log1p(math.exp(x)) for x in margins) / 3.0
    assert_allclose(parts["metric"], want, rtol=1e-12)


def test_objective_rejects_bad_shapes():
    vf = _FixedPredictions([0.5])
    with pytest.raises(ValueError, match="at least one"):
        lo.loss_learned_optimizer(np.zeros((1, 2)), np.ones(1), vf)
    with pytest.raises(ValueError, match="losses shape"):
        lo.loss_learned_optimizer(np.zeros((3, 2)), np.ones(2),
                                  _FixedPredictions([0.5, 0.5, 0.5]))


# ------------------------------------------------------------ ES training

def test_es_gradient_matches_analytic_on_quadratic():
    rng = np.random.default_rng(0)
    dim = 12
    half = rng.standard_normal((dim, dim))
    amat = half @ half.T / dim + np.eye(dim)
    b = rng.standard_normal(dim)
    w = rng.standard_normal(dim)
    est = lo.es_gradient(lambda v: 0.5 * v @ amat @ v + b @ v, w, rng,
                         pairs=1000, eps=0.1)
    true = amat @ w + b
    cos = est @ true / (np.linalg.norm(est) * np.linalg.norm(true))
    assert cos > 0.9


def test_train_zero_iterations_is_a_noop():
    opt = lo.LearnedOptimizer(np.random.default_rng(2))
    before = opt.net.param_vector()
    history = lo.train_learned_optimizer(
        opt, lambda r: toy.ToyMismatchTask(), toy.QuadraticBowl(),
        np.random.default_rng(0), iterations=0)
    assert history == []
    assert_array_equal(opt.net.param_vector(), before)


def test_train_is_deterministic():
    def one_run():
        opt = lo.LearnedOptimizer(np.random.default_rng(2))
        hist = lo.train_learned_optimizer(
            opt, lambda r: toy.ToyMismatchTask(), toy.QuadraticBowl(),
            np.random.default_rng(11), iterations=5, unroll_steps=8, pairs=2)
        return opt.net.param_vector(), hist
    v1, h1 = one_run()
    v2, h2 = one_run()
    assert_array_equal(v1, v2)
    assert h1 == h2


def test_train_discards_divergent_pairs_without_updating():
    opt = _zeroed_optimizer(out_bias=[1e9, 10.0])
    before = opt.net.param_vector()
    history = lo.train_learned_optimizer(
        opt, lambda r: toy.ToyMismatchTask(), toy.QuadraticBowl(),
        np.random.default_rng(4), iterations=2, unroll_steps=4, pairs=3)
    assert [h["pairs_used"] for h in history] == [0, 0]
    assert all("best_objective" not in h for h in history)
    assert_array_equal(opt.net.param_vector(), before)


def test_training_beats_untrained_and_sgd_on_toy():
    vf = toy.QuadraticBowl()
    opt = lo.LearnedOptimizer(np.random.default_rng(0))
    untrained = opt.clone()
    lo.train_learned_optimizer(opt, lambda r: toy.ToyMismatchTask(), vf,
                               np.random.default_rng(7), iterations=150,
                               unroll_steps=20, pairs=4, lr=1e-2)

    def final_value(optimizer, seed):
        phis, _ = lo.unroll_learned_opt(toy.ToyMismatchTask(), optimizer, vf,
                                        np.random.default_rng(seed), steps=20)
        return float(vf.predict(phis[-1])[0])

    def sgd_value(seed):
        task = toy.ToyMismatchTask()
        phi = task.init_phi(np.random.default_rng(seed))
        for _ in range(20):
            _, g = task.loss_grad(phi)
            phi = phi - 0.1 * g
        return float(vf.predict(phi)[0])

    trained, untrained_v, sgd = [], [], []
    for seed in range(100, 110):
        trained.append(final_value(opt, seed))
        untrained_v.append(final_value(untrained, seed))
        sgd.append(sgd_value(seed))
    wins = sum(t < u and t < s
               for t, u, s in zip(trained, untrained_v, sgd))
    assert np.mean(trained) < np.mean(untrained_v)
    assert np.mean(trained) < np.mean(sgd)
    assert wins >= 8


def test_joint_mode_refreshes_value_function_too():
    rng = np.random.default_rng(9)
    task = make_synthetic_task(rng, n=160, data_dim=5, adapter_dim=6,
                               hidden=(16, 8), pretrain_steps=40)
    vf = ValueFunction(6, np.random.default_rng(1))
    vf_before = vf.net.param_vector()
    opt = lo.LearnedOptimizer(np.random.default_rng(2))
    opt_before = opt.net.param_vector()
    history = lo.train_learned_optimizer(
        opt, lambda r: task, vf, np.random.default_rng(3), iterations=2,
        unroll_steps=8, pairs=2, batch_size=16, joint_value_fit=5)
    assert len(history) == 2
    assert not np.array_equal(vf.net.param_vector(), vf_before)
    assert not np.array_equal(opt.net.param_vector(), opt_before)


# ------------------------------------------------------------- container

def test_clone_is_independent():
    opt = lo.LearnedOptimizer(np.random.default_rng(5))
    dup = opt.clone()
    dup.net.params["b0"][:] = 99.0
    assert not np.array_equal(opt.net.params["b0"], dup.net.params["b0"])


def test_save_load_roundtrip(tmp_path):
    opt = lo.LearnedOptimizer(np.random.default_rng(6))
    path = tmp_path / "opt.ckpt"
    opt.save(path)
    back = lo.LearnedOptimizer.load(path)
    assert_array_equal(back.net.param_vector(), opt.net.param_vector())


def test_rejects_wrong_net_shape():
    from metricopt.nn import MLPSpec
    with pytest.raises(ValueError, match="optimizer net"):
        lo.LearnedOptimizer(np.random.default_rng(0), MLPSpec((5, 8, 2)))
