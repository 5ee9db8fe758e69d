"""Built-in oracle suites: fast, self-contained checks of the core math.

Each check recomputes an expected result by independent means (finite
differences, direct solves, hand-counted confusions, closed-form
identities) and compares. `metricopt selfcheck` runs them all and exits
nonzero if any fail. They are deliberately small — the full test suite
covers the same ground at scale — so the whole sweep takes seconds.
"""

import numpy as np

from metricopt import _kernels as K
from metricopt._kernels import BACKEND
from metricopt.finetune import finetune_task
from metricopt.gp import gp_posterior, interpolate_metrics
from metricopt.guided_es import MetricOptState, orthonormal_basis
from metricopt.learned_opt import loss_learned_optimizer
from metricopt.metrics import evaluate_metric, squash_loss
from metricopt.tasks import make_synthetic_task
from metricopt.toy import QuadraticBowl
from metricopt.value_function import (FISHER_THRESHOLD, ValueFunction,
                                      fisher_ratio, ordinal_embedding_loss,
                                      weighted_mae)

LN2 = float(np.log(2.0))


class CheckFailure(AssertionError):
    pass


def _require(cond, msg):
    if not cond:
        raise CheckFailure(msg)


def check_kernels():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    err = float(np.abs(K.affine_fwd(x, w, b) - (x @ w + b)).max())
    _require(err < 1e-10, f"affine kernel disagrees with x@w+b by {err:.2e}")
    return f"backend {BACKEND!r}, affine error {err:.1e}"


def check_autodiff():
    rng = np.random.default_rng(1)
    vf = ValueFunction(6, rng)
    phi = rng.standard_normal(6)
    _, grad = vf.predict_grad(phi)
    h = 1e-5
    fd = np.empty(6)
    for j in range(6):
        hi, lo = phi.copy(), phi.copy()
        hi[j] += h
        lo[j] -= h
        fd[j] = (vf.predict(hi)[0] - vf.predict(lo)[0]) / (2 * h)
    err = float(np.abs(grad - fd).max() / max(1.0, np.abs(fd).max()))
    _require(err < 1e-4, f"gradient vs finite differences: {err:.2e}")
    return f"max relative error vs finite differences {err:.1e}"


def check_gp():
    rng = np.random.default_rng(2)
    t = np.array([0.0, 8.0, 17.0, 29.0, 41.0, 50.0])
    y = 0.4 - 0.25 * t / 50.0 + 0.002 * rng.standard_normal(t.size)
    grid = np.arange(51.0)
    fit = interpolate_metrics(t, y, grid)
    at_obs = fit.means[t.astype(int)]
    err = float(np.abs(at_obs - y).max())
    _require(err < 0.05, f"interpolation misses its observations by {err:.3f}")
    # more observations can only shrink posterior uncertainty (fixed hypers)
    _, std5 = gp_posterior(t[:5], y[:5], grid, fit.length_scale,
                           fit.noise_var, fit.signal_var)
    _, std6 = gp_posterior(t, y, grid, fit.length_scale, fit.noise_var,
                           fit.signal_var)
    _require(bool(np.all(std6 <= std5 + 1e-9)),
             "adding an observation increased posterior std somewhere")
    return f"observation error {err:.4f}, information monotone"


def check_guided_es():
    rng = np.random.default_rng(3)
    d, k = 8, 3
    u = orthonormal_basis(rng.standard_normal((k, d)))
    k_eff = u.shape[1]
    sigma = 0.5 / d * np.eye(d) + 0.5 / k_eff * (u @ u.T)
    trace = float(np.trace(sigma))
    _require(abs(trace - 1.0) < 1e-12, f"tr(search covariance) = {trace!r}")
    state = MetricOptState(6, np.random.default_rng(4))
    phi = rng.standard_normal(6)
    flat = state.direction(lambda x: np.full(x.shape[0], 3.7), phi)
    _require(bool(np.all(flat == 0.0)),
             "constant function produced a nonzero search direction")
    return f"tr = {trace:.15f}; constant objective gives exactly zero"


def check_value_losses():
    rng = np.random.default_rng(5)
    pred = rng.standard_normal(7)
    m = rng.standard_normal(7)
    plain = float(np.mean(np.abs(pred - m)))
    got = weighted_mae(pred, m, np.ones(7))
    _require(abs(got - plain) < 1e-15,
             f"equal-uncertainty weighted error {got!r} != MAE {plain!r}")
    # equilateral embedding: the single mined triplet costs exactly log 2
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    ratio = fisher_ratio([0.0, 0.05, 1.0], [0.1, 0.1, 0.1])
    loss, _, n_trip = ordinal_embedding_loss(emb, ratio)
    _require(n_trip > 0, "no triplets mined from a separable arrangement")
    _require(abs(loss - LN2) < 1e-12,
             f"equidistant triplet loss {loss!r} != ln 2")
    boundary = fisher_ratio([0.0, 2.0], [1.0, 1.0])[0, 1]
    _require(boundary == 4.0 / 2.0 == FISHER_THRESHOLD,
             f"boundary ratio computed as {boundary!r}")
    _require(not (boundary < FISHER_THRESHOLD),
             "a boundary pair counted as metric-indistinguishable")
    return "weighted error, triplet ln 2 and separability boundary exact"


def check_learned_opt_objective():
    phis = np.tile([0.3, -0.2], (4, 1))
    losses = np.full(4, 0.9)
    _, parts = loss_learned_optimizer(phis, losses, QuadraticBowl())
    _require(parts["loss"] == 0.0,
             f"flat losses gave nonzero loss term {parts['loss']!r}")
    _require(abs(parts["metric"] - LN2) < 1e-12,
             f"flat metric term {parts['metric']!r} != ln 2")
    return "flat-trajectory identities hold (ln 2 and exact zero)"


def check_plugin_identity():
    task = make_synthetic_task(np.random.default_rng(6), n=120, data_dim=4,
                               adapter_dim=5, hidden=(12, 6),
                               pretrain_steps=25)
    base = finetune_task(task, "loss-only", np.random.default_rng(11),
                         steps=20, lr=0.05)
    vf = ValueFunction(5, np.random.default_rng(7))
    off = finetune_task(task, "metricopt-sgd", np.random.default_rng(11),
                        steps=20, lr=0.05, value_fn=vf, lam=0.0)
    _require(np.array_equal(base.phis, off.phis),
             "search weight 0 deviated from plain SGD iterates")
    return "metric weight 0 reproduces SGD bitwise over 20 steps"


def check_metrics():
    y = np.array([1, 0, 1, 1, 0])
    scores = np.array([0.9, 0.8, 0.4, 0.7, 0.2])
    # by hand: predictions [1,1,0,1,0] -> TP=2, FP=1, FN=1
    _require(evaluate_metric("mcr", y, scores) == 2 / 5, "mcr != 2/5")
    _require(evaluate_metric("f_measure", y, scores) == 4 / 6,
             "f-measure != 4/6")
    _require(evaluate_metric("jaccard", y, scores) == 2 / 4, "jaccard != 1/2")
    _require(squash_loss(0.0) == 0.0 and squash_loss(1.0) == 0.5,
             "loss squashing violates x/(1+x)")
    return "confusion counts and loss squashing match hand computation"


CHECKS = (
    ("kernels", check_kernels),
    ("autodiff", check_autodiff),
    ("gp-interpolation", check_gp),
    ("guided-es", check_guided_es),
    ("value-losses", check_value_losses),
    ("learned-opt-objective", check_learned_opt_objective),
    ("plugin-identity", check_plugin_identity),
    ("metrics", check_metrics),
)


def run_selfcheck(emit=print):
    """Run every check; emit one line each; True only if all passed."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            detail = fn()
        except Exception as err:  # a broken check must not mask the rest
            emit(f"FAIL {name}: {err}")
            all_ok = False
        else:
            emit(f"ok   {name}: {detail}")
    emit("all checks passed" if all_ok else "SELFCHECK FAILED")
    return all_ok
