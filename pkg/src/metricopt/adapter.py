"""Compact adapters: the low-dimensional knobs a finetuner is allowed to turn.

The backbone network stays frozen; only the adapter vector phi moves. Two
parameterizations:

``dynamic_bias``
    phi is appended to every input row. The backbone must have been built
    (and pretrained) with input width ``data_dim + dim``, with the phi block
    fed zeros during pretraining.

``film``
    phi = [rho; shift] modulates one hidden layer's post-activation
    features as ``(1 + rho) * h + shift``. phi = 0 is exactly the identity,
    so the pretrained backbone is untouched at init.
"""

import numpy as np

ADAPTER_KINDS = ("dynamic_bias", "film")


class AdapterConfig:
    """Which knobs exist: the kind, phi's dimension, and (film) the layer.

    ``init_scale`` sets the spread of the random start. It doubles as the
    task-diversity dial: value-function training only ever observes metric
    values where trajectories actually go, and since every loss-driven
    trajectory funnels into the same basin, a wide spread of starting points
    is what buys coverage transverse to that flow.
    """

    __slots__ = ("kind", "dim", "film_layer", "init_scale")

    def __init__(self, kind, dim, film_layer=0, init_scale=0.01):
        if kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {kind!r}; choose from {ADAPTER_KINDS}")
        if dim < 1:
            raise ValueError(f"adapter dim must be positive: {dim}")
        if init_scale <= 0:
            raise ValueError(f"init scale must be positive: {init_scale}")
        self.kind = kind
        self.dim = int(dim)
        self.film_layer = int(film_layer)
        self.init_scale = float(init_scale)

    def validate_against(self, base_spec, data_dim):
        """Check the adapter actually fits the backbone it will modulate."""
        sizes = base_spec.layer_sizes
        if self.kind == "dynamic_bias":
            if sizes[0] != data_dim + self.dim:
                raise ValueError(
                    f"dynamic_bias needs backbone input width {data_dim + self.dim} "
                    f"(= data {data_dim} + phi {self.dim}), got {sizes[0]}")
        else:
            if not 0 <= self.film_layer <= base_spec.n_layers - 2:
                raise ValueError(
                    f"film_layer {self.film_layer} is not a hidden layer "
                    f"of a {base_spec.n_layers}-layer net")
            width = sizes[self.film_layer + 1]
            if self.dim != 2 * width:
                raise ValueError(
                    f"film on layer {self.film_layer} (width {width}) needs "
                    f"dim {2 * width}, got {self.dim}")
            if sizes[0] != data_dim:
                raise ValueError(
                    f"backbone input width {sizes[0]} != data dim {data_dim}")


def init_phi(cfg, rng):
    """Random start: N(0, init_scale^2) per coordinate."""
    return cfg.init_scale * rng.standard_normal(cfg.dim)


def adapter_forward(base, cfg, phi, x, mode="eval"):
    logits, _ = _forward(base, cfg, phi, x, mode, want_cache=False)
    return logits


def adapter_forward_cached(base, cfg, phi, x, mode="eval"):
    return _forward(base, cfg, phi, x, mode, want_cache=True)


def _forward(base, cfg, phi, x, mode, want_cache):
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (cfg.dim,):
        raise ValueError(f"phi has shape {phi.shape}, expected ({cfg.dim},)")
    n = x.shape[0]
    if cfg.kind == "dynamic_bias":
        xa = np.concatenate([x, np.broadcast_to(phi, (n, cfg.dim))], axis=1)
        if want_cache:
            logits, cache = base.forward_cached(xa, mode=mode, update_stats=False)
            return logits, {"kind": "dynamic_bias", "cache": cache, "data_dim": x.shape[1]}
        return base.forward(xa, mode=mode), None
    j = cfg.film_layer
    width = base.spec.layer_sizes[j + 1]
    rho, shift = phi[:width], phi[width:]
    if want_cache:
        h, _ = base.forward_cached(x, lo=0, hi=j + 1, mode=mode, update_stats=False)
        hmod = (1.0 + rho) * h + shift
        logits, cache2 = base.forward_cached(hmod, lo=j + 1, mode=mode, update_stats=False)
        return logits, {"kind": "film", "h": h, "cache2": cache2, "width": width}
    h = base.forward(x, lo=0, hi=j + 1, mode=mode)
    hmod = (1.0 + rho) * h + shift
    return base.forward(hmod, lo=j + 1, mode=mode), None


def adapter_grad_phi(base, state, dlogits):
    """Gradient of a scalar objective w.r.t. phi, given d(objective)/d(logits).

    The backbone is frozen, so its own parameter gradients are discarded;
    only the path back to phi is kept.
    """
    if state["kind"] == "dynamic_bias":
        _, dx = base.backward(state["cache"], dlogits)
        return dx[:, state["data_dim"]:].sum(axis=0)
    _, dhmod = base.backward(state["cache2"], dlogits)
    drho = (dhmod * state["h"]).sum(axis=0)
    dshift = dhmod.sum(axis=0)
    return np.concatenate([drho, dshift])
