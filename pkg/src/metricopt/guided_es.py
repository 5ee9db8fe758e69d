"""Guided evolutionary search: metric guidance folded into gradient descent.

The value function is differentiable, but trusting its analytic gradient
everywhere would inherit its every wrinkle. Instead we probe it by
antithetic evolutionary search inside a low-dimensional subspace spanned by
recent loss gradients — directions finetuning already considers plausible —
softened by a full-space component. The resulting search direction is added
to the surrogate-loss gradient with weight lambda.
"""

import math

import numpy as np

DEFAULT_K = 3        # subspace size: how many recent loss gradients to keep
DEFAULT_P = 3        # antithetic perturbation pairs per step
DEFAULT_S2 = 0.01    # perturbation variance
_MGS_TOL = 1e-10     # absolute residual norm below which a vector adds nothing


class GradientHistory:
    """Ring buffer of the most recent loss gradients, newest first."""

    def __init__(self, k, dim):
        if k < 0:
            raise ValueError(f"history size must be non-negative: {k}")
        self.k = int(k)
        self.dim = int(dim)
        self._buf = []

    def push(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.dim,):
            raise ValueError(f"gradient has shape {g.shape}, expected ({self.dim},)")
        self._buf.insert(0, g.copy())
        del self._buf[self.k:]

    def matrix(self):
        if not self._buf:
            return np.zeros((0, self.dim))
        return np.stack(self._buf, axis=0)

    def __len__(self):
        return len(self._buf)


def orthonormal_basis(vectors, tol=_MGS_TOL):
    """Modified Gram-Schmidt over rows; returns a (dim, k_eff) column basis.

    Vectors whose residual after projection falls to ``tol`` or below are
    dropped, so duplicated or linearly dependent gradients shrink the
    subspace instead of poisoning it.
    """
    vs = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    basis = []
    for v in vs:
        w = v.copy()
        for b in basis:
            w -= (w @ b) * b
        nrm = np.linalg.norm(w)
        if nrm > tol:
            basis.append(w / nrm)
    if not basis:
        return np.zeros((vs.shape[1], 0))
    return np.stack(basis, axis=1)


def sample_perturbations(rng, u_basis, dim, p, s2):
    """Draw p rows from N(0, s2 * Sigma).

    Sigma = (1/2d) I + (1/2k) U U^T splits variance evenly between the full
    space and the gradient subspace, where k is the subspace's actual rank.
    With no usable subspace the full variance goes isotropic, Sigma = (1/d) I.
    Either way trace(Sigma) = 1.
    """
    s = math.sqrt(s2)
    k_eff = 0 if u_basis is None else u_basis.shape[1]
    eps_full = rng.standard_normal((p, dim))
    if k_eff == 0:
        return s * math.sqrt(1.0 / dim) * eps_full
    eps_sub = rng.standard_normal((p, k_eff))
    return s * (math.sqrt(0.5 / dim) * eps_full
                + math.sqrt(0.5 / k_eff) * (eps_sub @ u_basis.T))


def es_direction(f_batch, phi, deltas, s2):
    """Antithetic ES estimate (1/(s2*P)) * sum_i delta_i [f(phi+d_i) - f(phi-d_i)].

    All 2P queries go to ``f_batch`` as one (2P, dim) array — the value
    function amortizes them in a single forward pass.
    """
    p = deltas.shape[0]
    queries = np.vstack([phi + deltas, phi - deltas])
    vals = np.asarray(f_batch(queries), dtype=np.float64).ravel()
    if vals.shape != (2 * p,):
        raise ValueError(f"f_batch returned {vals.shape}, expected ({2 * p},)")
    diff = vals[:p] - vals[p:]
    return (deltas * diff[:, None]).sum(axis=0) / (s2 * p)


class MetricOptState:
    """Per-trajectory search state: gradient history plus the ES stream.

    ``direction`` turns a loss gradient into the effective gradient
    ``loss_grad + lam * u``. With lam == 0 it short-circuits — no history,
    no rng draws, the loss gradient returned untouched — so a wrapped
    optimizer is bitwise identical to the bare one.
    """

    def __init__(self, dim, rng, k=DEFAULT_K, p=DEFAULT_P, s2=DEFAULT_S2,
                 lam=1.0):
        if p < 1:
            raise ValueError(f"need at least one perturbation pair: {p}")
        if s2 <= 0:
            raise ValueError(f"perturbation variance must be positive: {s2}")
        self.dim = int(dim)
        self.rng = rng
        self.p = int(p)
        self.s2 = float(s2)
        self.lam = float(lam)
        self.history = GradientHistory(k, dim)

    def direction(self, f_batch, phi, loss_grad=None):
        """Effective update direction at phi.

        ``loss_grad=None`` is metric-only mode: pure value-function search,
        isotropic for want of a gradient subspace.
        """
        if self.lam == 0.0:
            if loss_grad is None:
                raise ValueError("lam=0 with no loss gradient leaves nothing to follow")
            return loss_grad
        if loss_grad is not None:
            self.history.push(loss_grad)
        basis = orthonormal_basis(self.history.matrix()) if len(self.history) else None
        deltas = sample_perturbations(self.rng, basis, self.dim, self.p, self.s2)
        u = es_direction(f_batch, np.asarray(phi, dtype=np.float64), deltas, self.s2)
        if loss_grad is None:
            return self.lam * u
        return loss_grad + self.lam * u
