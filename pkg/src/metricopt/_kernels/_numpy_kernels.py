"""Pure-NumPy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is not
available (see `metricopt._kernels.__init__`). Function signatures and
semantics must stay in lockstep with `_core.pyx`; the two backends agree to
floating-point roundoff (summation order differs, so results are close but
not bit-identical across backends).

All kernels take and return float64 arrays. Batch dimension is axis 0.
"""

import numpy as np


def affine_fwd(x, w, b):
    """y = x @ w + b for x (n, i), w (i, o), b (o,)."""
    return x @ w + b


def affine_bwd(x, w, dy):
    """Gradients of an affine layer: returns (dw, db, dx)."""
    dw = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ w.T
    return dw, db, dx


def leaky_relu_fwd(x, slope):
    """Elementwise max(x, slope*x); slope=0 gives plain ReLU."""
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_bwd(x, slope, dy):
    """Backward through leaky ReLU given the pre-activation x."""
    return np.where(x >= 0.0, dy, slope * dy)


def sigmoid_fwd(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, dy):
    """Backward through sigmoid given its output y."""
    return dy * y * (1.0 - y)


def bn_train_fwd(x, gamma, beta, eps):
    """Batch normalization with batch statistics.

    Returns (y, mean, var, xhat); var is the biased per-feature batch
    variance. Batch size 1 is allowed (var 0, xhat 0).
    """
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * gamma + beta, mean, var, xhat


def bn_train_bwd(xhat, var, gamma, eps, dy):
    """Backward through train-mode batch norm. Returns (dgamma, dbeta, dx)."""
    n = dy.shape[0]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    inv = 1.0 / np.sqrt(var + eps)
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dgamma, dbeta, dx


def bn_eval_fwd(x, gamma, beta, rmean, rvar, eps):
    """Batch norm as a frozen per-feature affine map (running statistics)."""
    return (x - rmean) / np.sqrt(rvar + eps) * gamma + beta


def bn_eval_bwd(x, rmean, rvar, gamma, eps, dy):
    """Backward through eval-mode batch norm. Returns (dgamma, dbeta, dx)."""
    inv = 1.0 / np.sqrt(rvar + eps)
    dgamma = (dy * (x - rmean) * inv).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx = dy * (gamma * inv)
    return dgamma, dbeta, dx


def pairwise_sqdist(e):
    """Squared Euclidean distances between all rows of e (n, k) -> (n, n).

    Mirrors the upper triangle onto the lower one: the norms-minus-gram
    shortcut is not bitwise symmetric (BLAS), and callers index both ways.
    """
    sq = (e * e).sum(axis=1)
    d = sq[:, None] - 2.0 * (e @ e.T) + sq[None, :]
    np.maximum(d, 0.0, out=d)
    d = np.triu(d, k=1)
    return d + d.T
