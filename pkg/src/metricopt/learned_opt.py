"""A small learned optimizer trained against both loss and metric signals.

A per-coordinate MLP maps seven features of the current finetuning state —
gradient, its running average, the parameter value, normalized loss and
metric, and their changes against running averages — to an update direction
plus a log-scale step-size vote. The optimizer weights are trained with
smoothed antithetic evolutionary strategies on an objective that rewards
stepwise metric improvement (as judged by the value function) and a low
final loss.
"""

import json

import numpy as np

from metricopt import gp
from metricopt.meta_train import observation_steps
from metricopt.metrics import squash_loss
from metricopt.nn import (MLP, AdamState, DivergenceError, MLPSpec,
                          NonFiniteError, adam_step)

METRIC_WEIGHT = 50.0    # weight of the metric term in the optimizer objective
BETA_FRAC = 0.5         # margin sharpness = BETA_FRAC * T
M_FLOOR = 1e-4
LOG_EPS = 1e-8
ALPHA_BASE = 1e-3       # base step scale; the net modulates it in log space
ALPHA_LOG_CLIP = 60.0   # keeps exp() finite; trajectories out here score badly
EMA_DECAY = 0.9
SMOOTHING_STD = 0.1     # sqrt of the 0.01 smoothing variance for ES training
N_FEATURES = 7
PHI_DIVERGE_BOUND = 1e6  # adapter coordinates are O(1); past this it's runaway


def default_opt_spec():
    return MLPSpec((N_FEATURES, 16, 16, 2))


class LearnedOptimizer:
    """Coordinate-wise update net: 7 features in, (direction, log-step) out."""

    def __init__(self, rng, spec=None):
        spec = spec or default_opt_spec()
        if spec.layer_sizes[0] != N_FEATURES or spec.layer_sizes[-1] != 2:
            raise ValueError(
                f"optimizer net must map {N_FEATURES} -> 2, got {spec.layer_sizes}")
        self.net = MLP(spec, rng)

    def clone(self):
        dup = object.__new__(LearnedOptimizer)
        dup.net = self.net.copy()
        return dup

    def save(self, path):
        self.net.save(path)

    @classmethod
    def load(cls, path):
        opt = object.__new__(cls)
        opt.net = MLP.load(path)
        return opt


class FeatureAverages:
    """Running averages behind the change features; start equal to step 1."""

    __slots__ = ("gbar", "lbar", "mbar")

    def __init__(self, grad, loss_n, metric):
        self.gbar = grad.copy()
        self.lbar = loss_n
        self.mbar = metric


def opt_features(phi, grad, loss_n, metric, avg):
    """Assemble the (d, 7) per-coordinate feature matrix and roll the averages.

    ``loss_n`` must already be normalized (see ``metrics.squash_loss``);
    the metric is assumed in [0, 1] scale. On the first step pass
    ``avg=None``: the averages initialize to the current values, making
    both change features exactly zero.
    """
    if avg is None:
        avg = FeatureAverages(grad, loss_n, metric)
    feats = np.empty((phi.size, N_FEATURES))
    feats[:, 0] = grad
    feats[:, 1] = avg.gbar
    feats[:, 2] = phi
    feats[:, 3] = loss_n
    feats[:, 4] = loss_n - avg.lbar
    feats[:, 5] = metric
    feats[:, 6] = metric - avg.mbar
    avg.gbar = EMA_DECAY * avg.gbar + (1 - EMA_DECAY) * grad
    avg.lbar = EMA_DECAY * avg.lbar + (1 - EMA_DECAY) * loss_n
    avg.mbar = EMA_DECAY * avg.mbar + (1 - EMA_DECAY) * metric
    return feats, avg


def learned_opt_step(opt, phi, feats):
    """phi_{t+1} = phi_t + alpha_t u_t with (u, log-step) from the net.

    The step size is shared across coordinates: alpha_t = base * exp(mean
    of the per-coordinate log-step outputs), clipped in log space so the
    arithmetic stays finite (a step that large is already a lost run).
    """
    out = opt.net.forward(feats, mode="eval")
    u = out[:, 0]
    alpha = ALPHA_BASE * np.exp(np.clip(np.mean(out[:, 1]), -ALPHA_LOG_CLIP,
                                        ALPHA_LOG_CLIP))
    return phi + alpha * u, float(alpha), u


def unroll_learned_opt(task, opt, value_fn, rng, steps, batch_size=32):
    """Drive ``steps`` learned-optimizer updates on one task.

    Features see the minibatch loss (what an optimizer has at runtime);
    the returned per-step losses are full training-split values for the
    objective. Returns (phis (T+1, d), losses (T+1,)).
    """
    phi = task.init_phi(rng)
    batches = task.batches(batch_size, steps, rng)
    phis = np.empty((steps + 1, phi.size))
    losses = np.empty(steps + 1)
    phis[0] = phi
    losses[0] = task.loss(phi, "train")
    avg = None
    for t, sel in enumerate(batches):
        loss_b, grad = task.loss_grad(phi, sel)
        if not (np.isfinite(loss_b) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"loss or gradient non-finite at step {t}")
        metric = float(value_fn.predict(phi)[0])
        feats, avg = opt_features(phi, grad, squash_loss(loss_b), metric, avg)
        phi, _, _ = learned_opt_step(opt, phi, feats)
        # max-abs rather than a norm: detects runaway while every later
        # computation on phi is still far from overflow
        if not np.all(np.isfinite(phi)) or np.max(np.abs(phi)) > PHI_DIVERGE_BOUND:
            raise DivergenceError(f"parameters diverged at step {t + 1}")
        phis[t + 1] = phi
        losses[t + 1] = task.loss(phi, "train")
    return phis, losses


def loss_learned_optimizer(phis, losses, value_fn):
    """Optimizer training objective over one unrolled trajectory.

    The metric term compares each step's predicted metric against the best
    prediction seen before it, through a softplus of the relative margin
    (sharpness beta = T/2); the loss term is the mean log loss offset by
    its starting value. Returns (total, parts) with the pieces for logging.
    """
    phis = np.atleast_2d(phis)
    losses = np.asarray(losses, dtype=np.float64)
    t_steps = phis.shape[0] - 1
    if t_steps < 1:
        raise ValueError("need at least one optimization step")
    if losses.shape != (t_steps + 1,):
        raise ValueError(f"losses shape {losses.shape} != ({t_steps + 1},)")
    m_hat = np.maximum(value_fn.predict(phis), M_FLOOR)
    beta = BETA_FRAC * t_steps
    running_best = np.minimum.accumulate(m_hat)[:-1]  # best over i < t
    margins = beta * (m_hat[1:] - running_best) / m_hat[1:]
    l_metric = float(np.mean(np.logaddexp(0.0, margins)))
    l_loss = float(np.mean(np.log(losses[1:] + LOG_EPS)
                           - np.log(losses[0] + LOG_EPS)))
    total = METRIC_WEIGHT * l_metric + l_loss
    return total, {"total": total, "metric": l_metric, "loss": l_loss}


def es_gradient(fn, w, rng, pairs, eps=SMOOTHING_STD):
    """Antithetic two-point ES estimate of the gradient of ``fn`` at ``w``."""
    grad = np.zeros_like(w)
    for _ in range(pairs):
        xi = rng.standard_normal(w.size)
        grad += (fn(w + eps * xi) - fn(w - eps * xi)) / (2.0 * eps) * xi
    return grad / pairs


def train_learned_optimizer(opt, task_sampler, value_fn, rng, *, iterations,
                            unroll_steps=20, pairs=4, eps=SMOOTHING_STD,
                            lr=1e-2, batch_size=32, joint_value_fit=0,
                            obs_frac=0.05, log_fh=None):
    """Smoothed-objective ES training of the optimizer weights, in place.

    Each iteration draws one task and estimates the gradient of the
    smoothed objective by antithetic weight perturbations; both members of
    a pair unroll with identical task randomness (initialization and
    minibatches), so their difference isolates the weight perturbation. A
    pair whose unroll diverges is discarded. With ``joint_value_fit`` > 0
    the value function is also refreshed each round from the center
    weights' trajectory using sparse true-metric observations (that many
    fit steps), alternating the two updates.
    """
    vec = {"w": opt.net.param_vector()}
    state = AdamState(vec)
    history = []
    for it in range(1, iterations + 1):
        task = task_sampler(rng)
        if joint_value_fit:
            seed = int(rng.integers(1 << 30))
            phis, _ = unroll_learned_opt(task, opt, value_fn,
                                         np.random.default_rng(seed),
                                         unroll_steps, batch_size)
            obs = observation_steps(unroll_steps + 1, obs_frac, "stride", rng)
            vals = np.array([task.metric_minimized(phis[t], "val") for t in obs])
            fit = gp.interpolate_metrics(obs, vals, np.arange(unroll_steps + 1))
            value_fn.fit(phis, fit.means, fit.stds, steps=joint_value_fit,
                         lr=0.005)

        def objective(w_vec, seed):
            trial = opt.clone()
            trial.net.set_param_vector(w_vec)
            phis, losses = unroll_learned_opt(task, trial, value_fn,
                                              np.random.default_rng(seed),
                                              unroll_steps, batch_size)
            total, _ = loss_learned_optimizer(phis, losses, value_fn)
            return total

        grad = np.zeros_like(vec["w"])
        used = 0
        best = np.inf
        for _ in range(pairs):
            xi = rng.standard_normal(vec["w"].size)
            seed = int(rng.integers(1 << 30))
            try:
                up = objective(vec["w"] + eps * xi, seed)
                down = objective(vec["w"] - eps * xi, seed)
            except (NonFiniteError, DivergenceError):
                continue
            grad += (up - down) / (2.0 * eps) * xi
            used += 1
            best = min(best, up, down)
        record = {"event": "opt_iteration", "iteration": it, "pairs_used": used}
        if used:
            grad /= used
            adam_step(vec, {"w": grad}, state, lr)
            opt.net.set_param_vector(vec["w"])
            record["best_objective"] = float(best)
        history.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
    return history
