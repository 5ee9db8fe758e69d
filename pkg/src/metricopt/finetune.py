"""Meta-test drivers: finetune one task under each update method.

Every method shares the same skeleton — draw the adapter initialization,
walk minibatches, log one JSON line per step — and differs only in how a
step direction is produced: the bare loss gradient, the loss gradient
plus a value-function search direction (through SGD or Adam), the search
direction alone, or a trained learned optimizer.
"""

import json

import numpy as np

from metricopt.guided_es import DEFAULT_K, DEFAULT_P, DEFAULT_S2, MetricOptState
from metricopt.learned_opt import learned_opt_step, opt_features
from metricopt.metrics import MINIMIZED_RANGE, squash_loss
from metricopt.nn import AdamState, adam_step

METHODS = ("loss-only", "metricopt-sgd", "metricopt-adam",
           "metricopt-learned", "metric-only")
_GUIDED = ("metricopt-sgd", "metricopt-adam", "metric-only")


def _search_objective(value_fn):
    """The value function as the search sees it: clamped to the metric range.

    The regression head is unbounded, and far off the trajectory manifold it
    can promise metric values no rate can take — steep enough that the search
    would chase them over a cliff. Clamping means perturbations landing in
    fantasy territory difference to zero and contribute no pull, while the
    honest region passes through untouched.
    """
    lo, hi = MINIMIZED_RANGE

    def f_batch(queries):
        return np.clip(value_fn.predict(queries), lo, hi)

    return f_batch


class FinetuneResult:
    """Everything a results row or a comparison needs from one run."""

    __slots__ = ("method", "phis", "step_losses", "final_train_loss",
                 "metric_minimized", "metric_raw")

    def __init__(self, method, phis, step_losses, final_train_loss,
                 metric_minimized, metric_raw):
        self.method = method
        self.phis = phis
        self.step_losses = step_losses
        self.final_train_loss = final_train_loss
        self.metric_minimized = metric_minimized
        self.metric_raw = metric_raw


def finetune_task(task, method, rng, *, steps=50, lr=0.05, batch_size=32,
                  value_fn=None, learned_opt=None, lam=1.0, k=DEFAULT_K,
                  p=DEFAULT_P, s2=DEFAULT_S2, metric_every=0, log_fh=None):
    """Run one finetuning trajectory and measure it on the test split.

    The rng drives initialization and batch order identically across
    methods; search noise comes from a spawned child stream, so with
    ``lam=0`` the guided methods consume exactly the same randomness as
    ``loss-only`` and reproduce its iterates bitwise. ``metric_every > 0``
    additionally evaluates the true validation metric every that many
    steps and logs it (the final step is always included).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if method in _GUIDED and value_fn is None:
        raise ValueError(f"{method} needs a value-function checkpoint")
    if method == "metricopt-learned" and (value_fn is None or learned_opt is None):
        raise ValueError("metricopt-learned needs a value function and "
                         "trained optimizer weights")

    phi = np.array(task.init_phi(rng), dtype=np.float64)
    batches = task.batches(batch_size, steps, rng)
    state = None
    f_search = None
    if method in _GUIDED:
        state = MetricOptState(phi.size, rng.spawn(1)[0], k=k, p=p, s2=s2,
                               lam=lam)
        f_search = _search_objective(value_fn)
    adam = AdamState({"phi": phi}) if method == "metricopt-adam" else None
    params = {"phi": phi.copy()}
    avg = None  # learned-optimizer feature averages

    phis = np.empty((steps + 1, phi.size))
    step_losses = np.empty(steps)
    phis[0] = phi
    for t, sel in enumerate(batches, start=1):
        loss_b, grad = task.loss_grad(phi, sel)
        if method == "loss-only":
            new_phi = phi - lr * grad
        elif method == "metricopt-sgd":
            new_phi = phi - lr * state.direction(f_search, phi, grad)
        elif method == "metric-only":
            # the loss gradient is observed for the log but never followed
            new_phi = phi - lr * state.direction(f_search, phi, None)
        elif method == "metricopt-adam":
            g_eff = state.direction(f_search, phi, grad)
            adam_step(params, {"phi": g_eff}, adam, lr)
            new_phi = params["phi"].copy()
        else:  # metricopt-learned
            metric = float(value_fn.predict(phi)[0])
            feats, avg = opt_features(phi, grad, squash_loss(loss_b),
                                      metric, avg)
            new_phi, _, _ = learned_opt_step(learned_opt, phi, feats)
        record = {"t": t, "loss": float(loss_b),
                  "u_norm": float(np.linalg.norm(new_phi - phi)),
                  "grad_norm": float(np.linalg.norm(grad))}
        if metric_every and (t % metric_every == 0 or t == steps):
            record["metric"] = float(task.metric_minimized(new_phi, "val"))
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
        phi = new_phi
        phis[t] = phi
        step_losses[t - 1] = loss_b
    if log_fh is not None:
        log_fh.flush()
    return FinetuneResult(method, phis, step_losses,
                          float(task.loss(phi, "train")),
                          float(task.metric_minimized(phi, "test")),
                          float(task.metric_raw(phi, "test")))
