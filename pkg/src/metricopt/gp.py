"""Gaussian-process interpolation of sparsely observed metric trajectories.

Metric evaluations are expensive, so a finetuning trajectory only measures
its metric at a few steps. A one-dimensional GP over the step index (RBF
kernel, prior mean = observation mean) fills in the rest, giving every step
an estimate and an uncertainty that downstream training uses as weights.
"""

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

LENGTH_SCALE_FRACS = (1 / 20, 1 / 10, 1 / 5, 1 / 2)
NOISE_GRID = (1e-4, 1e-3, 1e-2)
DEFAULT_LS_FRAC = 1 / 10
DEFAULT_NOISE = 1e-3
STD_FLOOR = 1e-3
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class GPFit:
    """Dense posterior plus the hyperparameters that produced it."""

    __slots__ = ("means", "stds", "length_scale", "noise_var", "signal_var")

    def __init__(self, means, stds, length_scale, noise_var, signal_var):
        self.means = means
        self.stds = stds
        self.length_scale = length_scale
        self.noise_var = noise_var
        self.signal_var = signal_var


def _rbf(a, b, length_scale, signal_var):
    d = a[:, None] - b[None, :]
    return signal_var * np.exp(-0.5 * (d / length_scale) ** 2)


def _chol_with_jitter(k):
    """Cholesky factor of k, escalating diagonal jitter until it succeeds."""
    for jit in _JITTERS:
        try:
            return cho_factor(k + jit * np.eye(k.shape[0]), lower=True)
        except LinAlgError:
            continue
    raise LinAlgError("kernel matrix not positive definite even with jitter 1e-6")


def log_marginal_likelihood(t_obs, y_obs, length_scale, noise_var, signal_var):
    t = np.asarray(t_obs, dtype=np.float64)
    y = np.asarray(y_obs, dtype=np.float64)
    c = y.mean()
    k = _rbf(t, t, length_scale, signal_var) + noise_var * np.eye(t.size)
    factor = _chol_with_jitter(k)
    alpha = cho_solve(factor, y - c)
    logdet = 2.0 * np.log(np.diag(factor[0])).sum()
    return float(-0.5 * (y - c) @ alpha - 0.5 * logdet - 0.5 * t.size * math.log(2 * math.pi))


def select_hyperparams(t_obs, y_obs, horizon):
    """Grid-search (length_scale, noise) by marginal likelihood.

    Needs at least 3 observations to say anything; below that, or when the
    observations have (near-)zero variance, fall back to the defaults.
    Ties resolve toward the largest length scale — the smoothest
    explanation that fits equally well.
    """
    t = np.asarray(t_obs, dtype=np.float64)
    y = np.asarray(y_obs, dtype=np.float64)
    signal_var = float(y.var())
    default = (horizon * DEFAULT_LS_FRAC, DEFAULT_NOISE, signal_var)
    if t.size < 3 or signal_var < 1e-12:
        return default
    best = None
    best_lml = -np.inf
    for frac in LENGTH_SCALE_FRACS:
        ls = horizon * frac
        for noise in NOISE_GRID:
            lml = log_marginal_likelihood(t, y, ls, noise, signal_var)
            if lml >= best_lml:
                best_lml = lml
                best = (ls, noise, signal_var)
    return best


def gp_posterior(t_obs, y_obs, t_query, length_scale, noise_var, signal_var):
    """Exact posterior mean and std on the query grid.

    The prior mean is the observation mean, and the predictive variance
    includes the observation noise — it answers "what would a measurement
    at this step look like", which is what the uncertainty weights need.
    """
    t = np.asarray(t_obs, dtype=np.float64)
    y = np.asarray(y_obs, dtype=np.float64)
    q = np.asarray(t_query, dtype=np.float64)
    c = y.mean()
    k_oo = _rbf(t, t, length_scale, signal_var) + noise_var * np.eye(t.size)
    k_qo = _rbf(q, t, length_scale, signal_var)
    factor = _chol_with_jitter(k_oo)
    alpha = cho_solve(factor, y - c)
    mean = c + k_qo @ alpha
    v = cho_solve(factor, k_qo.T)
    var = signal_var - np.einsum("ij,ji->i", k_qo, v) + noise_var
    np.maximum(var, 0.0, out=var)
    return mean, np.sqrt(var)


def interpolate_metrics(t_obs, m_obs, t_grid):
    """Sparse metric observations -> dense (mean, std) over a whole trajectory.

    Hyperparameters come from `select_hyperparams`; means are clamped to the
    metric's [0, 1] range and stds floored at 1e-3 so nothing downstream
    divides by zero or trusts an interpolation absolutely.
    """
    t = np.asarray(t_obs, dtype=np.float64)
    m = np.asarray(m_obs, dtype=np.float64)
    if t.size == 0:
        raise ValueError("need at least one metric observation")
    if t.size != m.size:
        raise ValueError(f"got {t.size} steps but {m.size} values")
    if np.unique(t).size != t.size:
        raise ValueError("observation steps must be distinct")
    grid = np.asarray(t_grid, dtype=np.float64)
    ls, noise, signal = select_hyperparams(t, m, horizon=float(grid.size))
    mean, std = gp_posterior(t, m, grid, ls, noise, signal)
    np.clip(mean, 0.0, 1.0, out=mean)
    np.maximum(std, STD_FLOOR, out=std)
    return GPFit(mean, std, ls, noise, signal)
