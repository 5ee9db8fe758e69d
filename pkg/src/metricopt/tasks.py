"""Task assembly: pretrained frozen backbones plus adapter finetuning hooks.

A task is the unit both meta-training and evaluation consume: it owns a
frozen backbone, an adapter configuration, data splits and a target metric,
and exposes exactly two views of quality — the differentiable surrogate
loss (cross-entropy) and black-box metric evaluations on a split.
"""

import numpy as np
from scipy.special import expit

from metricopt import adapter as ad
from metricopt import data as dt
from metricopt import metrics as mt
from metricopt.nn import MLP, MLPSpec, AdamState, DivergenceError, adam_step


def pretrain_base_model(spec, x, y, rng, steps, lr=1e-3, batch_size=32,
                        adapter_dim=0):
    """Train a backbone with Adam on class-balanced batches.

    When ``adapter_dim > 0`` every input row is padded with that many zero
    features — the slot a dynamic-bias adapter occupies later, so the
    backbone learns weights for it without ever seeing it move. ``steps=0``
    returns the freshly initialized net untouched.
    """
    net = MLP(spec, rng)
    if steps == 0:
        return net
    state = AdamState(net.params)
    batches = dt.class_balanced_batches(y, batch_size, steps, rng)
    for step, sel in enumerate(batches):
        xb = x[sel]
        if adapter_dim:
            xb = np.concatenate([xb, np.zeros((xb.shape[0], adapter_dim))], axis=1)
        logits, cache = net.forward_cached(xb, mode="train", update_stats=True)
        loss, dz = mt.cross_entropy_from_logits(y[sel], logits.ravel())
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}")
        grads, _ = net.backward(cache, dz.reshape(-1, 1))
        adam_step(net.params, grads, state, lr)
    return net


class FinetuneTask:
    """Frozen backbone + adapter + splits + the metric being chased.

    The backbone (parameters and normalization statistics alike) is never
    written after construction; only the adapter vector phi moves. All
    forward passes run in eval mode so metric queries are deterministic
    functions of phi.
    """

    def __init__(self, base, cfg, splits, metric_kind):
        if metric_kind not in mt.METRIC_KINDS:
            raise ValueError(
                f"unknown metric kind {metric_kind!r}; choose from {mt.METRIC_KINDS}")
        cfg.validate_against(base.spec, splits.x_train.shape[1])
        self.base = base
        self.cfg = cfg
        self.splits = splits
        self.metric_kind = metric_kind

    @property
    def dim(self):
        return self.cfg.dim

    def init_phi(self, rng):
        return ad.init_phi(self.cfg, rng)

    def batches(self, batch_size, n_batches, rng):
        return dt.class_balanced_batches(self.splits.y_train, batch_size,
                                         n_batches, rng)

    def loss_grad(self, phi, batch_idx):
        """Surrogate loss and its phi-gradient on one training batch."""
        x = self.splits.x_train[batch_idx]
        y = self.splits.y_train[batch_idx]
        logits, state = ad.adapter_forward_cached(self.base, self.cfg, phi, x)
        loss, dz = mt.cross_entropy_from_logits(y, logits.ravel())
        dphi = ad.adapter_grad_phi(self.base, state, dz.reshape(-1, 1))
        return loss, dphi

    def loss(self, phi, split="train"):
        x, y = self.splits.split(split)
        logits = ad.adapter_forward(self.base, self.cfg, phi, x)
        value, _ = mt.cross_entropy_from_logits(y, logits.ravel())
        return value

    def predict_probs(self, phi, split):
        x, _ = self.splits.split(split)
        return expit(ad.adapter_forward(self.base, self.cfg, phi, x).ravel())

    def metric_raw(self, phi, split="val"):
        _, y = self.splits.split(split)
        return mt.evaluate_metric(self.metric_kind, y, self.predict_probs(phi, split))

    def metric_minimized(self, phi, split="val"):
        """The black box the search sees: lower is better, range [0, 1]."""
        return mt.to_minimize(self.metric_kind, self.metric_raw(phi, split))


def make_task_from_data(x, y, rng, *, metric_kind="mcr",
                        adapter_kind="dynamic_bias", adapter_dim=16,
                        film_layer=0, phi_scale=0.01, train_flip=0.0,
                        hidden=(100, 30, 10), hidden_slope=0.01,
                        batchnorm=True, pretrain_steps=150, pretrain_lr=1e-3,
                        batch_size=32):
    """Split the given arrays, pretrain a backbone, and wrap them as a task.

    The rng drives the split, the backbone init and its pretraining
    batches, so the same data with different generators yields a family of
    distinct pretrained models over one dataset.

    ``train_flip`` relabels that fraction of the positive *training* points
    as negative — one-sided annotation noise. The surrogate loss then fits
    a posterior that is systematically conservative about the positive
    class while the validation and test metrics stay clean, so the loss
    minimum and the metric optimum genuinely part ways — the disagreement
    a metric-guided finetuner exists to exploit.
    """
    data_dim = x.shape[1]
    splits = dt.stratified_splits(x, y, rng)
    if train_flip > 0.0:
        pos = np.flatnonzero(splits.y_train == 1)
        n_flip = int(round(train_flip * pos.size))
        if n_flip:
            y_tr = splits.y_train.copy()
            y_tr[rng.choice(pos, size=n_flip, replace=False)] = 0
            splits.y_train = y_tr
    if adapter_kind == "dynamic_bias":
        in_width = data_dim + adapter_dim
        pad = adapter_dim
    else:
        in_width = data_dim
        pad = 0
    spec_sizes = (in_width,) + tuple(hidden) + (1,)
    spec = MLPSpec(spec_sizes, hidden_slope=hidden_slope, batchnorm=batchnorm)
    base = pretrain_base_model(spec, splits.x_train, splits.y_train, rng,
                               steps=pretrain_steps, lr=pretrain_lr,
                               batch_size=batch_size, adapter_dim=pad)
    cfg = ad.AdapterConfig(adapter_kind, adapter_dim, film_layer=film_layer,
                           init_scale=phi_scale)
    return FinetuneTask(base, cfg, splits, metric_kind)


def make_synthetic_task(rng, *, n=600, data_dim=10, imbalance=0.25,
                        separation=2.0, metric_kind="mcr",
                        adapter_kind="dynamic_bias", adapter_dim=16,
                        film_layer=0, phi_scale=0.01, train_flip=0.0,
                        hidden=(100, 30, 10), hidden_slope=0.01,
                        batchnorm=True, pretrain_steps=150, pretrain_lr=1e-3,
                        batch_size=32):
    """Sample a dataset, pretrain a backbone, and wrap them as a task.

    One draw from the task family the meta-learner trains across: the rng
    drives the data, the split, the backbone init and its pretraining
    batches, so a seeded generator reproduces the task exactly.
    """
    x, y = dt.synthetic_binary(n, data_dim, imbalance, separation, rng)
    return make_task_from_data(x, y, rng, metric_kind=metric_kind,
                               adapter_kind=adapter_kind,
                               adapter_dim=adapter_dim, film_layer=film_layer,
                               phi_scale=phi_scale, train_flip=train_flip,
                               hidden=hidden, hidden_slope=hidden_slope,
                               batchnorm=batchnorm,
                               pretrain_steps=pretrain_steps,
                               pretrain_lr=pretrain_lr, batch_size=batch_size)
