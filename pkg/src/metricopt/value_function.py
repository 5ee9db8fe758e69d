"""Learned value function: adapter parameters in, metric estimate out.

A small MLP trained on finetuning trajectories. Two objectives shape it:
an uncertainty-weighted regression onto interpolated metric values, and an
ordinal-embedding term that pushes the penultimate features of steps with
distinguishable metrics apart while pulling indistinguishable ones
together. Distinguishability comes from Fisher's criterion on the metric
estimates; the hardest in-set / out-of-set examples under the current
embedding distances form the triplets.
"""

import numpy as np

from metricopt import _kernels as K
from metricopt.nn import MLP, MLPSpec, AdamState, adam_step

GAMMA = 10.0              # weight of the regression term in the total loss
FISHER_THRESHOLD = 2.0    # r below: same metric level; at or above: separable
EMBED_WIDTH = 16
_SQ_EPS = 1e-12           # inside the sqrt so distance gradients stay finite


def default_value_spec(dim):
    """dim-64-32-32-16-1, batchnorm + ReLU on every hidden layer."""
    return MLPSpec((dim, 64, 32, 32, EMBED_WIDTH, 1), hidden_slope=0.0,
                   batchnorm=True, out_activation="identity")


def fisher_ratio(m, s):
    """Pairwise separability r[i,j] = (m_i - m_j)^2 / (s_i^2 + s_j^2)."""
    m = np.asarray(m, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    diff = m[:, None] - m[None, :]
    denom = s[:, None] ** 2 + s[None, :] ** 2
    return diff * diff / denom


def mine_triplets(dist, ratio):
    """Hardest-positive / hardest-negative triplets for every usable anchor.

    For anchor t, positives are the other steps with ratio < threshold
    (metric indistinguishable) and negatives those at or above it. The
    positive farthest from t and the negative closest to t in embedding
    space form the triplet; anchors lacking either set contribute nothing.
    Returns index arrays (anchors, positives, negatives).
    """
    n = dist.shape[0]
    anchors, pos, neg = [], [], []
    same = ratio < FISHER_THRESHOLD
    for t in range(n):
        p_mask = same[t].copy()
        p_mask[t] = False
        n_mask = ~same[t]
        n_mask[t] = False
        if not p_mask.any() or not n_mask.any():
            continue
        d = dist[t]
        p_idx = np.flatnonzero(p_mask)
        n_idx = np.flatnonzero(n_mask)
        anchors.append(t)
        pos.append(p_idx[np.argmax(d[p_idx])])
        neg.append(n_idx[np.argmin(d[n_idx])])
    return (np.asarray(anchors, dtype=np.intp),
            np.asarray(pos, dtype=np.intp),
            np.asarray(neg, dtype=np.intp))


def weighted_mae(pred, m, s):
    """Self-normalized uncertainty-weighted regression error.

    sum |pred - m| / s over sum 1 / s: certain steps dominate, and a
    uniform rescaling of the uncertainties changes nothing.
    """
    w = 1.0 / np.asarray(s, dtype=np.float64)
    return float(np.sum(np.abs(pred - m) * w) / np.sum(w))


def ordinal_embedding_loss(emb, ratio):
    """Soft triplet loss over mined triplets, averaged; plus its gradient.

    Per triplet the penalty is log(1 + exp(-(d_neg - d_pos))) on Euclidean
    embedding distances, so equal distances cost exactly log 2 and the loss
    falls as negatives move beyond positives. Returns
    (loss, d_loss/d_emb, n_triplets); no usable triplets means a zero loss
    and zero gradient.
    """
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    dist = np.sqrt(K.pairwise_sqdist(emb) + _SQ_EPS)
    a_idx, p_idx, n_idx = mine_triplets(dist, ratio)
    d_emb = np.zeros_like(emb)
    if a_idx.size == 0:
        return 0.0, d_emb, 0
    d_ap = dist[a_idx, p_idx]
    d_an = dist[a_idx, n_idx]
    x = d_an - d_ap
    loss = float(np.mean(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x)))))
    coef = -1.0 / (1.0 + np.exp(np.minimum(x, 500.0))) / a_idx.size  # -sigmoid(-x)/n
    for c, a, p, q, dap, dan in zip(coef, a_idx, p_idx, n_idx, d_ap, d_an):
        ean = (emb[a] - emb[q]) / dan
        eap = (emb[a] - emb[p]) / dap
        d_emb[a] += c * (ean - eap)
        d_emb[q] -= c * ean
        d_emb[p] += c * eap
    return loss, d_emb, int(a_idx.size)


class ValueFunction:
    """MLP wrapper fixing the embedding tap and the training objective."""

    def __init__(self, dim, rng, spec=None):
        spec = spec or default_value_spec(dim)
        if spec.layer_sizes[0] != dim or spec.layer_sizes[-1] != 1:
            raise ValueError(f"value net must map {dim} -> 1, got {spec.layer_sizes}")
        self.dim = dim
        self.net = MLP(spec, rng)

    @property
    def _emb_hi(self):
        return self.net.spec.n_layers - 1

    def predict(self, phis, mode="eval"):
        """Metric estimates for a batch of adapter vectors, shape (n,)."""
        return self.net.forward(np.atleast_2d(phis), mode=mode).ravel()

    def embed(self, phis, mode="eval"):
        return self.net.forward(np.atleast_2d(phis), lo=0, hi=self._emb_hi, mode=mode)

    def predict_grad(self, phi):
        """Value and d(value)/d(phi) at a single point (eval mode)."""
        y, cache = self.net.forward_cached(np.atleast_2d(phi), mode="eval",
                                           update_stats=False)
        _, dx = self.net.backward(cache, np.ones((1, 1)))
        return float(y[0, 0]), dx[0]

    def loss_and_grads(self, phis, m_hat, s_hat, gamma=GAMMA, use_oe=True):
        """Total training loss and parameter gradients on one trajectory.

        Runs in train mode (batch statistics over the trajectory, running
        stats updated). Returns (parts, grads) where parts carries the
        scalar pieces for logging. ``use_oe=False`` drops the ordinal
        embedding term (the ablation arm), leaving pure weighted regression.
        """
        phis = np.atleast_2d(phis)
        m = np.asarray(m_hat, dtype=np.float64)
        s = np.asarray(s_hat, dtype=np.float64)
        n = phis.shape[0]

        emb, cache1 = self.net.forward_cached(phis, lo=0, hi=self._emb_hi,
                                              mode="train", update_stats=True)
        out, cache2 = self.net.forward_cached(emb, lo=self._emb_hi,
                                              mode="train", update_stats=True)
        f = out.ravel()

        w = 1.0 / s
        wsum = np.sum(w)
        resid = f - m
        regress = float(np.sum(np.abs(resid) * w) / wsum)
        d_f = (np.sign(resid) * w / wsum).reshape(-1, 1)

        if use_oe:
            oe, d_emb_oe, n_triplets = ordinal_embedding_loss(emb, fisher_ratio(m, s))
        else:
            oe, d_emb_oe, n_triplets = 0.0, np.zeros_like(emb), 0

        grads2, d_emb_from_f = self.net.backward(cache2, gamma * d_f)
        grads1, _ = self.net.backward(cache1, d_emb_from_f + d_emb_oe)
        grads = {**grads1, **grads2}
        parts = {"total": gamma * regress + oe, "regress": regress, "oe": oe,
                 "n_triplets": n_triplets}
        return parts, grads

    def fit(self, phis, m_hat, s_hat, steps, lr=1e-3, gamma=GAMMA, state=None,
            use_oe=True):
        """Adam on the training objective; triplets re-mined every step.

        Returns the loss-part history (and mutates this net in place). Pass
        an existing AdamState to continue an earlier fit.
        """
        state = state or AdamState(self.net.params)
        history = []
        for _ in range(steps):
            parts, grads = self.loss_and_grads(phis, m_hat, s_hat, gamma=gamma,
                                               use_oe=use_oe)
            adam_step(self.net.params, grads, state, lr)
            history.append(parts)
        return history

    def save(self, path):
        self.net.save(path)

    @classmethod
    def from_net(cls, net):
        vf = object.__new__(cls)
        vf.dim = net.spec.layer_sizes[0]
        vf.net = net
        return vf

    def clone(self):
        return type(self).from_net(self.net.copy())

    @classmethod
    def load(cls, path):
        return cls.from_net(MLP.load(path))
