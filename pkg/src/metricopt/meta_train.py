"""Meta-training the value function across finetuning tasks.

Each meta-iteration finetunes one sampled task by plain loss-driven SGD,
observes its metric at a few steps, interpolates those observations into
dense targets, and lets a clone of the value function fit that single
trajectory. The clone's progress is folded back with a Reptile step whose
size decays linearly, distilling many tasks into one initialization. An
offline variant buffers the trajectories first and spends the same
gradient-step budget fitting them directly.
"""

import json

import numpy as np

from metricopt import gp
from metricopt.nn import NonFiniteError, AdamState
from metricopt.value_function import weighted_mae

OBS_FRAC = 0.05
INNER_LR = 0.005   # inner learning rate for the per-task value-function fit


class FinetuneTrajectory:
    """One finetuning run: the phi path, its losses, sparse metric readings."""

    __slots__ = ("phis", "losses", "obs_steps", "obs_values")

    def __init__(self, phis, losses, obs_steps, obs_values):
        self.phis = phis
        self.losses = losses
        self.obs_steps = obs_steps
        self.obs_values = obs_values

    def __len__(self):
        return self.phis.shape[0]


def observation_steps(n_grid, obs_frac, schedule, rng):
    """Which steps of a length-``n_grid`` trajectory get a metric evaluation."""
    count = max(2, int(np.ceil(obs_frac * n_grid)))
    count = min(count, n_grid)
    if schedule == "stride":
        return np.unique(np.round(np.linspace(0, n_grid - 1, count)).astype(int))
    if schedule == "random":
        return np.sort(rng.choice(n_grid, size=count, replace=False))
    raise ValueError(f"unknown observation schedule {schedule!r}")


def run_finetune_task(task, rng, steps=50, lr=0.05, batch_size=32,
                      obs_frac=OBS_FRAC, obs_schedule="stride"):
    """Loss-only SGD over phi, recording the trajectory and sparse metrics.

    The metric (minimized form, validation split) is evaluated only at the
    scheduled steps — it is treated as expensive even when it isn't here.
    """
    phi = task.init_phi(rng)
    batches = task.batches(batch_size, steps, rng)
    phis = np.empty((steps + 1, task.dim))
    losses = np.empty(steps + 1)
    phis[0] = phi
    losses[0] = task.loss(phi, "train")
    for t, sel in enumerate(batches):
        _, g = task.loss_grad(phi, sel)
        phi = phi - lr * g
        phis[t + 1] = phi
        losses[t + 1] = task.loss(phi, "train")
    obs = observation_steps(steps + 1, obs_frac, obs_schedule, rng)
    values = np.array([task.metric_minimized(phis[t], "val") for t in obs])
    return FinetuneTrajectory(phis, losses, obs, values)


def value_targets(traj):
    """Dense (mean, std) metric targets for every step of a trajectory."""
    fit = gp.interpolate_metrics(traj.obs_steps, traj.obs_values,
                                 np.arange(len(traj)))
    return fit.means, fit.stds


def reptile_update(net, inner_net, eta):
    """w <- w + eta (w' - w) on parameters; running stats copied from w'.

    Computed as the equivalent (1-eta) w + eta w' so the endpoints are
    exact: eta=1 leaves precisely the inner weights, eta=0 precisely the
    old ones. Normalization statistics are derived state, not
    meta-parameters: the freshest estimates (the inner run's) are carried.
    """
    for k, w in net.params.items():
        net.params[k] = (1.0 - eta) * w + eta * inner_net.params[k]
    for k in net.stats:
        net.stats[k] = inner_net.stats[k].copy()


def _heldout_errors(value_fn, heldout):
    """Per-trajectory mean |f(phi_t) - target_t|, plus the weighted form."""
    mae, wmae = [], []
    for traj, means, stds in heldout:
        pred = value_fn.predict(traj.phis, mode="eval")
        mae.append(float(np.mean(np.abs(pred - means))))
        wmae.append(float(weighted_mae(pred, means, stds)))
    return mae, wmae


def _log(fh, record):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def meta_train(value_fn, task_sampler, n_tasks, rng, *, heldout_tasks=(),
               traj_steps=50, traj_lr=0.05, batch_size=32, obs_frac=OBS_FRAC,
               obs_schedule="stride", inner_steps=50, inner_lr=INNER_LR,
               eta0=1.0, eval_every=0, offline=False, use_oe=True, gamma=None,
               stats_reservoir=5, log_fh=None, max_consecutive_failures=3):
    """Train ``value_fn`` in place across ``n_tasks`` sampled tasks.

    ``task_sampler(rng)`` draws a fresh task; ``heldout_tasks`` get one
    trajectory each up front, and the value function's prediction error on
    them — mean |f(phi_t) - target_t|, the diagnostic of record — is
    reported before training, every ``eval_every`` tasks (0: only at the
    ends), and after the last task. Returns the report.

    After each merge the running stats are recalibrated on the last
    ``stats_reservoir`` trajectories (0 disables). The merge averages
    weights across tasks, so stats recorded under any one inner run no
    longer describe the merged net's activations — eval-mode outputs
    drift by whole units without this. Single-trajectory recalibration is
    not enough either: one trajectory is a thin curve in phi space whose
    batch statistics don't transfer to the next task's curve.

    A task whose inner fit goes non-finite is skipped; more than
    ``max_consecutive_failures`` such tasks in a row aborts.
    """
    fit_kw = {} if gamma is None else {"gamma": float(gamma)}
    heldout_rng = rng.spawn(1)[0]
    heldout = []
    for task in heldout_tasks:
        traj = run_finetune_task(task, heldout_rng, steps=traj_steps, lr=traj_lr,
                                 batch_size=batch_size, obs_frac=obs_frac,
                                 obs_schedule=obs_schedule)
        means, stds = value_targets(traj)
        heldout.append((traj, means, stds))

    report = {"mode": "offline" if offline else "online", "n_tasks": n_tasks,
              "failures": 0, "heldout": []}

    def evaluate(after):
        if not heldout:
            return
        mae, wmae = _heldout_errors(value_fn, heldout)
        entry = {"after_tasks": after, "mae": mae, "wmae": wmae,
                 "mean_mae": float(np.mean(mae)),
                 "mean_wmae": float(np.mean(wmae))}
        report["heldout"].append(entry)
        _log(log_fh, {"event": "heldout_eval", **entry})

    evaluate(0)

    if offline:
        _meta_train_offline(value_fn, task_sampler, n_tasks, rng, report,
                            traj_steps, traj_lr, batch_size, obs_frac,
                            obs_schedule, inner_steps, inner_lr, use_oe,
                            fit_kw, log_fh)
        evaluate(n_tasks)
        return report

    consecutive = 0
    reservoir = []
    for i in range(1, n_tasks + 1):
        eta = eta0 * (1.0 - (i - 1) / n_tasks)
        task = task_sampler(rng)
        traj = run_finetune_task(task, rng, steps=traj_steps, lr=traj_lr,
                                 batch_size=batch_size, obs_frac=obs_frac,
                                 obs_schedule=obs_schedule)
        means, stds = value_targets(traj)
        inner_vf = value_fn.clone()
        try:
            hist = inner_vf.fit(traj.phis, means, stds, steps=inner_steps,
                                lr=inner_lr, use_oe=use_oe, **fit_kw)
        except NonFiniteError as err:
            consecutive += 1
            report["failures"] += 1
            _log(log_fh, {"event": "task_failed", "task": i, "error": str(err)})
            if consecutive >= max_consecutive_failures:
                raise RuntimeError(
                    f"{consecutive} consecutive tasks failed to fit; "
                    "aborting meta-training") from err
            continue
        consecutive = 0
        reptile_update(value_fn.net, inner_vf.net, eta)
        if stats_reservoir:
            reservoir.append(traj.phis)
            del reservoir[:-stats_reservoir]
            value_fn.net.reset_stats(np.vstack(reservoir))
        _log(log_fh, {"event": "task", "task": i, "eta": float(eta),
                      "inner_first": float(hist[0]["total"]),
                      "inner_last": float(hist[-1]["total"]),
                      "n_triplets": hist[-1]["n_triplets"]})
        if eval_every and i % eval_every == 0 and i < n_tasks:
            evaluate(i)

    evaluate(n_tasks)
    return report


def _meta_train_offline(value_fn, task_sampler, n_tasks, rng, report,
                        traj_steps, traj_lr, batch_size, obs_frac,
                        obs_schedule, inner_steps, inner_lr, use_oe, fit_kw,
                        log_fh):
    """Buffer all trajectories, then spend the same step budget on them."""
    buffer = []
    for i in range(1, n_tasks + 1):
        task = task_sampler(rng)
        traj = run_finetune_task(task, rng, steps=traj_steps, lr=traj_lr,
                                 batch_size=batch_size, obs_frac=obs_frac,
                                 obs_schedule=obs_schedule)
        means, stds = value_targets(traj)
        buffer.append((traj, means, stds))
    _log(log_fh, {"event": "buffered", "n_trajectories": len(buffer)})
    state = AdamState(value_fn.net.params)
    for cycle in range(n_tasks):
        traj, means, stds = buffer[cycle % len(buffer)]
        hist = value_fn.fit(traj.phis, means, stds, steps=inner_steps,
                            lr=inner_lr, state=state, use_oe=use_oe, **fit_kw)
        _log(log_fh, {"event": "offline_cycle", "cycle": cycle + 1,
                      "loss_last": float(hist[-1]["total"])})
