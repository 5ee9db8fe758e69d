"""Datasets: a synthetic two-Gaussian family, libsvm loading, splits, batching."""

import numpy as np


class DataFormatError(ValueError):
    """Raised when an input file does not parse as expected."""


class Splits:
    """Train/validation/test arrays bundled together."""

    __slots__ = ("x_train", "y_train", "x_val", "y_val", "x_test", "y_test")

    def __init__(self, x_train, y_train, x_val, y_val, x_test, y_test):
        self.x_train = x_train
        self.y_train = y_train
        self.x_val = x_val
        self.y_val = y_val
        self.x_test = x_test
        self.y_test = y_test

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, f"x_{name}"), getattr(self, f"y_{name}")


def synthetic_binary(n, dim, imbalance, separation, rng):
    """Two isotropic Gaussians with class means ``separation`` apart.

    The positive class carries ``round(imbalance * n)`` points (at least one
    of each class). Means sit at +/- separation/2 along a random unit
    direction so no single feature is the answer. Returns (x, y) with y in
    {0, 1}, shuffled.
    """
    if not 0.0 < imbalance < 1.0:
        raise ValueError(f"imbalance must be in (0, 1): {imbalance}")
    n_pos = min(max(int(round(imbalance * n)), 1), n - 1)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    x = rng.standard_normal((n, dim))
    y = np.zeros(n, dtype=np.int64)
    y[:n_pos] = 1
    x[:n_pos] += 0.5 * separation * u
    x[n_pos:] -= 0.5 * separation * u
    perm = rng.permutation(n)
    return x[perm], y[perm]


def stratified_splits(x, y, rng, fracs=(0.7, 0.1, 0.2)):
    """Split preserving class proportions; every split gets both classes.

    Fractions are applied per class with the test split absorbing rounding
    remainders.
    """
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1: {fracs}")
    idx_parts = [[], [], []]
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        if members.size < 3:
            raise ValueError(f"class {cls} has only {members.size} points; need >= 3")
        members = members[rng.permutation(members.size)]
        n_train = max(int(round(fracs[0] * members.size)), 1)
        n_val = max(int(round(fracs[1] * members.size)), 1)
        if n_train + n_val >= members.size:
            n_train = members.size - n_val - 1 if members.size - n_val - 1 >= 1 else 1
            n_val = min(n_val, members.size - n_train - 1)
        idx_parts[0].append(members[:n_train])
        idx_parts[1].append(members[n_train:n_train + n_val])
        idx_parts[2].append(members[n_train + n_val:])
    out = []
    for part in idx_parts:
        sel = np.concatenate(part)
        sel = sel[rng.permutation(sel.size)]
        out.extend([x[sel], y[sel]])
    return Splits(*out)


def load_libsvm(path):
    """Read a libsvm-format file into dense arrays.

    Labels {-1, +1} (or {0, 1}) map onto {0, 1}; feature indices are
    1-based; omitted features are zero. Malformed lines raise
    `DataFormatError` naming the line.
    """
    labels = []
    rows = []
    max_idx = 0
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            try:
                raw = float(fields[0])
            except ValueError:
                raise DataFormatError(f"{path}:{ln}: bad label {fields[0]!r}")
            if raw in (-1.0, 0.0):
                labels.append(0)
            elif raw == 1.0:
                labels.append(1)
            else:
                raise DataFormatError(f"{path}:{ln}: label {raw} not in {{-1,0,+1}}")
            feats = {}
            for field in fields[1:]:
                try:
                    idx_s, val_s = field.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DataFormatError(f"{path}:{ln}: bad feature {field!r}")
                if idx < 1:
                    raise DataFormatError(f"{path}:{ln}: feature index {idx} < 1")
                feats[idx] = val
            max_idx = max(max_idx, max(feats) if feats else 0)
            rows.append(feats)
    if not rows:
        raise DataFormatError(f"{path}: no data lines")
    x = np.zeros((len(rows), max_idx))
    for i, feats in enumerate(rows):
        for idx, val in feats.items():
            x[i, idx - 1] = val
    return x, np.asarray(labels, dtype=np.int64)


def class_balanced_batches(y, batch_size, n_batches, rng):
    """Index batches with ceil(B/2) positives, the rest negatives.

    Classes are sampled with replacement, so small classes simply repeat;
    the model sees a balanced stream regardless of the marginal rate.
    """
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("class-balanced batching needs both classes present")
    n_pos = (batch_size + 1) // 2
    n_neg = batch_size - n_pos
    batches = []
    for _ in range(n_batches):
        p = pos[rng.integers(0, pos.size, size=n_pos)]
        q = neg[rng.integers(0, neg.size, size=n_neg)]
        batches.append(np.concatenate([p, q]))
    return batches
