"""Dense MLP with explicit forward caches and manual backprop.

Built on the swappable kernel backend in `metricopt._kernels`. Networks are
small (widest layer ~100 units) and get called millions of times, so the
layer loop stays simple and allocation-light. Forward and backward accept a
half-open layer slice ``[lo, hi)`` so callers can stop at an intermediate
feature map — penultimate embeddings, feature modulation — and resume from
there with gradients flowing through both pieces.
"""

import json
import math
import struct

import numpy as np

from metricopt import _kernels as K

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_CKPT_MAGIC = b"MOPTCKPT"

_OUT_ACTIVATIONS = ("identity", "sigmoid")


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class DivergenceError(RuntimeError):
    """An optimization run left the finite regime and was aborted."""


class MLPSpec:
    """Architecture description: affine widths plus activation choices.

    ``layer_sizes`` lists widths from input to output, so ``(7, 32, 2)`` has
    one hidden layer. Hidden layers apply leaky ReLU with ``hidden_slope``
    as the negative-side slope (0.0 is plain ReLU); ``batchnorm`` switches
    per-feature normalization on before each hidden activation, either for
    all hidden layers at once (bool) or per layer (tuple of bools). The
    output layer is affine followed by ``out_activation`` and never
    normalized.
    """

    __slots__ = ("layer_sizes", "hidden_slope", "batchnorm", "out_activation")

    def __init__(self, layer_sizes, hidden_slope=0.0, batchnorm=False,
                 out_activation="identity"):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output width")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer widths must be positive: {sizes}")
        slope = float(hidden_slope)
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"hidden_slope outside [0, 1): {slope}")
        if out_activation not in _OUT_ACTIVATIONS:
            raise ValueError(f"unknown out_activation {out_activation!r}")
        n_hidden = len(sizes) - 2
        if isinstance(batchnorm, bool):
            bn = (batchnorm,) * n_hidden
        else:
            bn = tuple(bool(f) for f in batchnorm)
            if len(bn) != n_hidden:
                raise ValueError(
                    f"got {len(bn)} batchnorm flags for {n_hidden} hidden layers")
        self.layer_sizes = sizes
        self.hidden_slope = slope
        self.batchnorm = bn
        self.out_activation = out_activation

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def __eq__(self, other):
        return isinstance(other, MLPSpec) and self.to_json() == other.to_json()

    def __repr__(self):
        return (f"MLPSpec({self.layer_sizes}, hidden_slope={self.hidden_slope}, "
                f"batchnorm={self.batchnorm}, out_activation={self.out_activation!r})")

    def to_json(self):
        return json.dumps(
            {
                "layer_sizes": list(self.layer_sizes),
                "hidden_slope": self.hidden_slope,
                "batchnorm": [bool(f) for f in self.batchnorm],
                "out_activation": self.out_activation,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            layer_sizes=d["layer_sizes"],
            hidden_slope=d["hidden_slope"],
            batchnorm=d["batchnorm"],
            out_activation=d["out_activation"],
        )


class MLP:
    """Fully connected net holding parameters and batchnorm statistics.

    ``params`` maps ``w{j}``/``b{j}`` (and ``g{j}``/``beta{j}`` where layer
    ``j`` is normalized) to float64 arrays; running mean/variance buffers
    live in ``stats`` under ``rm{j}``/``rv{j}`` and are *not* parameters.
    Weights start He-uniform (bound ``sqrt(6/fan_in)``), biases at zero,
    scale/shift at one/zero.
    """

    def __init__(self, spec, rng):
        self.spec = spec
        self.params = {}
        self.stats = {}
        sizes = spec.layer_sizes
        for j in range(spec.n_layers):
            bound = math.sqrt(6.0 / sizes[j])
            self.params[f"w{j}"] = rng.uniform(-bound, bound, size=(sizes[j], sizes[j + 1]))
            self.params[f"b{j}"] = np.zeros(sizes[j + 1])
            if j < spec.n_layers - 1 and spec.batchnorm[j]:
                self.params[f"g{j}"] = np.ones(sizes[j + 1])
                self.params[f"beta{j}"] = np.zeros(sizes[j + 1])
                self.stats[f"rm{j}"] = np.zeros(sizes[j + 1])
                self.stats[f"rv{j}"] = np.ones(sizes[j + 1])

    def copy(self):
        dup = object.__new__(MLP)
        dup.spec = self.spec
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.stats = {k: v.copy() for k, v in self.stats.items()}
        return dup

    def param_names(self):
        """Parameter keys in a stable order (used for flattening)."""
        names = []
        for j in range(self.spec.n_layers):
            names.append(f"w{j}")
            names.append(f"b{j}")
            if f"g{j}" in self.params:
                names.append(f"g{j}")
                names.append(f"beta{j}")
        return names

    @property
    def n_params(self):
        return sum(self.params[k].size for k in self.param_names())

    def param_vector(self):
        return np.concatenate([self.params[k].ravel() for k in self.param_names()])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for k in self.param_names():
            p = self.params[k]
            self.params[k] = vec[off:off + p.size].reshape(p.shape).copy()
            off += p.size
        if off != vec.size:
            raise ValueError(f"vector has {vec.size} entries, net has {off} parameters")

    # -- forward / backward ------------------------------------------------

    def forward(self, x, lo=0, hi=None, mode="eval", update_stats=False):
        y, _ = self._run(x, lo, hi, mode, update_stats, want_cache=False)
        return y

    def forward_cached(self, x, lo=0, hi=None, mode="train", update_stats=True):
        """Like ``forward`` but also returns the cache ``backward`` needs.

        The cache snapshots everything backward reads (including running
        stats in eval mode), so later forwards cannot corrupt it.
        """
        return self._run(x, lo, hi, mode, update_stats, want_cache=True)

    def _run(self, x, lo, hi, mode, update_stats, want_cache):
        L = self.spec.n_layers
        if hi is None:
            hi = L
        if not 0 <= lo < hi <= L:
            raise ValueError(f"bad layer slice [{lo}, {hi}) for {L} layers")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h = np.ascontiguousarray(x, dtype=np.float64)
        if h.ndim != 2:
            raise ValueError(f"expected a 2-d batch, got shape {np.shape(x)}")
        if h.shape[1] != self.spec.layer_sizes[lo]:
            raise ValueError(
                f"input width {h.shape[1]} != layer-{lo} width {self.spec.layer_sizes[lo]}")
        slope = self.spec.hidden_slope
        layers = [] if want_cache else None
        for j in range(lo, hi):
            rec = {"x": h} if want_cache else None
            h = K.affine_fwd(h, self.params[f"w{j}"], self.params[f"b{j}"])
            if j < L - 1:
                if self.spec.batchnorm[j]:
                    if mode == "train":
                        h, mean, var, xhat = K.bn_train_fwd(
                            h, self.params[f"g{j}"], self.params[f"beta{j}"], BN_EPS)
                        if update_stats:
                            m = BN_MOMENTUM
                            self.stats[f"rm{j}"] = m * self.stats[f"rm{j}"] + (1 - m) * mean
                            self.stats[f"rv{j}"] = m * self.stats[f"rv{j}"] + (1 - m) * var
                        if want_cache:
                            rec["xhat"] = xhat
                            rec["var"] = var
                    else:
                        if want_cache:
                            rec["bn_in"] = h
                            rec["rm"] = self.stats[f"rm{j}"].copy()
                            rec["rv"] = self.stats[f"rv{j}"].copy()
                        h = K.bn_eval_fwd(
                            h, self.params[f"g{j}"], self.params[f"beta{j}"],
                            self.stats[f"rm{j}"], self.stats[f"rv{j}"], BN_EPS)
                if want_cache:
                    rec["pre"] = h
                h = K.leaky_relu_fwd(h, slope)
            elif self.spec.out_activation == "sigmoid":
                h = K.sigmoid_fwd(h)
                if want_cache:
                    rec["sig"] = h
            if want_cache:
                layers.append(rec)
        if not np.isfinite(h).all():
            raise NonFiniteError(f"forward produced non-finite values at layer {hi - 1}")
        cache = {"lo": lo, "hi": hi, "mode": mode, "layers": layers} if want_cache else None
        return h, cache

    def backward(self, cache, dy):
        """Run backprop over the slice recorded in ``cache``.

        Returns ``(grads, dx)`` where ``grads`` holds entries only for
        parameters of layers in the slice and ``dx`` is the gradient with
        respect to the slice's input batch.
        """
        L = self.spec.n_layers
        lo, hi, mode = cache["lo"], cache["hi"], cache["mode"]
        g = np.ascontiguousarray(dy, dtype=np.float64)
        slope = self.spec.hidden_slope
        grads = {}
        for j in range(hi - 1, lo - 1, -1):
            rec = cache["layers"][j - lo]
            if j < L - 1:
                g = K.leaky_relu_bwd(rec["pre"], slope, g)
                if self.spec.batchnorm[j]:
                    if mode == "train":
                        dgamma, dbeta, g = K.bn_train_bwd(
                            rec["xhat"], rec["var"], self.params[f"g{j}"], BN_EPS, g)
                    else:
                        dgamma, dbeta, g = K.bn_eval_bwd(
                            rec["bn_in"], rec["rm"], rec["rv"],
                            self.params[f"g{j}"], BN_EPS, g)
                    grads[f"g{j}"] = dgamma
                    grads[f"beta{j}"] = dbeta
            elif self.spec.out_activation == "sigmoid":
                g = K.sigmoid_bwd(rec["sig"], g)
            dw, db, g = K.affine_bwd(rec["x"], self.params[f"w{j}"], g)
            grads[f"w{j}"] = dw
            grads[f"b{j}"] = db
        if not np.isfinite(g).all():
            raise NonFiniteError("backward produced non-finite input gradients")
        return grads, g

    def reset_stats(self, x):
        """Overwrite running stats with this batch's statistics.

        One exact calibration pass under the current parameters: afterwards
        an eval-mode forward on ``x`` equals the train-mode forward. Needed
        after parameter averaging, which strands running stats collected
        under different weights.
        """
        h = np.ascontiguousarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.spec.layer_sizes[0]:
            raise ValueError(f"expected (n, {self.spec.layer_sizes[0]}) batch, "
                             f"got shape {np.shape(x)}")
        if h.shape[0] < 2:
            raise ValueError("need at least 2 rows to estimate batch statistics")
        slope = self.spec.hidden_slope
        for j in range(self.spec.n_layers - 1):
            h = K.affine_fwd(h, self.params[f"w{j}"], self.params[f"b{j}"])
            if self.spec.batchnorm[j]:
                h, mean, var, _ = K.bn_train_fwd(
                    h, self.params[f"g{j}"], self.params[f"beta{j}"], BN_EPS)
                self.stats[f"rm{j}"] = mean
                self.stats[f"rv{j}"] = var
            h = K.leaky_relu_fwd(h, slope)

    # -- checkpointing -----------------------------------------------------
    #
    # Deliberately not .npz: zip archives embed wall-clock timestamps, so two
    # identical runs would produce different bytes. This container is a JSON
    # index followed by raw .npy blocks, byte-identical for identical state.

    def save(self, path):
        index = {
            "spec": json.loads(self.spec.to_json()),
            "params": sorted(self.params),
            "stats": sorted(self.stats),
        }
        blob = json.dumps(index, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for k in index["params"]:
                np.lib.format.write_array(fh, self.params[k], allow_pickle=False)
            for k in index["stats"]:
                np.lib.format.write_array(fh, self.stats[k], allow_pickle=False)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(_CKPT_MAGIC))
            if magic != _CKPT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (hlen,) = struct.unpack("<I", fh.read(4))
            index = json.loads(fh.read(hlen).decode("utf-8"))
            net = object.__new__(cls)
            net.spec = MLPSpec.from_json(json.dumps(index["spec"]))
            net.params = {}
            net.stats = {}
            for k in index["params"]:
                net.params[k] = np.lib.format.read_array(fh, allow_pickle=False)
            for k in index["stats"]:
                net.stats[k] = np.lib.format.read_array(fh, allow_pickle=False)
        return net


# -- parameter-space optimizers ---------------------------------------------


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g`` for every key present in ``grads``."""
    for k, g in grads.items():
        params[k] -= lr * g


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    __slots__ = ("m", "v", "t")

    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
