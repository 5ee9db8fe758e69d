"""Black-box evaluation metrics and the training loss.

All metrics map (labels, scores) to a value in [0, 1]. For search we fold
them into minimized form: misclassification rate is already a cost, the
others are qualities and become ``1 - value``. Hard decisions use a fixed
0.5 threshold on scores (ties count as positive); ranking metrics use the
scores directly.
"""

import numpy as np

METRIC_KINDS = ("mcr", "f_measure", "jaccard", "aucpr")

HIGHER_BETTER = {"mcr": False, "f_measure": True, "jaccard": True, "aucpr": True}

THRESHOLD = 0.5

_CLIP = 1e-12


def _counts(y_true, scores):
    y = np.asarray(y_true)
    pred = np.asarray(scores) >= THRESHOLD
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, fn


def mcr(y_true, scores):
    """Misclassification rate at the fixed threshold."""
    y = np.asarray(y_true)
    pred = (np.asarray(scores) >= THRESHOLD).astype(y.dtype)
    return float(np.mean(pred != y))


def f_measure(y_true, scores):
    """Balanced F-score 2TP / (2TP + FP + FN); 0 when that denominator is 0."""
    tp, fp, fn = _counts(y_true, scores)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def jaccard(y_true, scores):
    """Intersection over union TP / (TP + FP + FN); 0 when undefined."""
    tp, fp, fn = _counts(y_true, scores)
    denom = tp + fp + fn
    return tp / denom if denom else 0.0


def aucpr(y_true, scores):
    """Area under the precision-recall curve, computed as average precision.

    Rank by score descending with original index as the tie-break, then
    average the precision at each positive's rank. 0 when there are no
    positives.
    """
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=np.float64)
    n = y.shape[0]
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        return 0.0
    order = np.lexsort((np.arange(n), -s))
    hits = (y[order] == 1).astype(np.float64)
    precisions = np.cumsum(hits) / np.arange(1, n + 1)
    return float(np.sum(precisions * hits) / n_pos)


_METRIC_FNS = {"mcr": mcr, "f_measure": f_measure, "jaccard": jaccard, "aucpr": aucpr}


def evaluate_metric(kind, y_true, scores):
    """Raw metric value in [0, 1] for the given kind."""
    try:
        fn = _METRIC_FNS[kind]
    except KeyError:
        raise ValueError(f"unknown metric kind {kind!r}; choose from {METRIC_KINDS}")
    return fn(y_true, scores)


def to_minimize(kind, raw):
    """Fold a raw metric value so lower is always better."""
    if kind not in _METRIC_FNS:
        raise ValueError(f"unknown metric kind {kind!r}; choose from {METRIC_KINDS}")
    return raw if kind == "mcr" else 1.0 - raw


# Every minimized metric is a rate, so it lives in this interval; squashed
# losses land in [0, 1) as well. Consumers that treat model predictions as
# metric estimates can clamp to this range.
MINIMIZED_RANGE = (0.0, 1.0)


def evaluate_metric_minimized(kind, y_true, scores):
    return to_minimize(kind, evaluate_metric(kind, y_true, scores))


# -- training loss ------------------------------------------------------------


def cross_entropy(y_true, probs):
    """Mean binary cross-entropy on probabilities, clipped away from {0, 1}."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.clip(np.asarray(probs, dtype=np.float64), _CLIP, 1.0 - _CLIP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def cross_entropy_from_logits(y_true, logits):
    """Mean binary cross-entropy straight from logits, with its gradient.

    Uses softplus(z) - y*z, so nothing overflows for large |z|. Returns
    ``(loss, dloss_dz)``. Matches `cross_entropy` on sigmoid(z) whenever the
    probabilities stay inside the clip range.
    """
    y = np.asarray(y_true, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    loss = float(np.mean(softplus - y * z))
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    dz = (sig - y) / z.size
    return loss, dz


def squash_loss(x):
    """Map a non-negative loss onto [0, 1) via x / (1 + x)."""
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + x)
