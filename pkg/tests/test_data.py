"""Synthetic data family, stratified splitting, libsvm parsing, batching."""

import numpy as np
import pytest

from metricopt import data as dt


def test_synthetic_binary_counts_and_separation():
    rng = np.random.default_rng(31)
    x, y = dt.synthetic_binary(200, 6, imbalance=0.25, separation=3.0, rng=rng)
    assert x.shape == (200, 6) and y.shape == (200,)
    assert int(y.sum()) == 50
    gap = x[y == 1].mean(axis=0) - x[y == 0].mean(axis=0)
    assert 2.0 < np.linalg.norm(gap) < 4.0  # ~separation, up to sampling noise


def test_synthetic_binary_deterministic():
    a = dt.synthetic_binary(50, 4, 0.3, 2.0, np.random.default_rng(7))
    b = dt.synthetic_binary(50, 4, 0.3, 2.0, np.random.default_rng(7))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_synthetic_binary_validates_imbalance():
    with pytest.raises(ValueError):
        dt.synthetic_binary(10, 2, 0.0, 1.0, np.random.default_rng(0))


def test_stratified_splits_proportions_and_partition():
    rng = np.random.default_rng(32)
    x, y = dt.synthetic_binary(300, 5, 0.3, 2.0, rng=rng)
    sp = dt.stratified_splits(x, y, rng)
    sizes = [sp.y_train.size, sp.y_val.size, sp.y_test.size]
    assert sum(sizes) == 300
    assert abs(sizes[0] - 210) <= 2 and abs(sizes[1] - 30) <= 2
    for ys in (sp.y_train, sp.y_val, sp.y_test):
        assert set(np.unique(ys)) == {0, 1}
    # per-class proportions carry over
    assert abs(int(sp.y_train.sum()) - 63) <= 2
    # rows form a partition of the input (standard-normal rows are unique)
    seen = [xs.tobytes() for s in (sp.x_train, sp.x_val, sp.x_test) for xs in s]
    assert len(seen) == 300 and len(set(seen)) == 300
    orig = {row.tobytes() for row in x}
    assert set(seen) == orig


def test_stratified_splits_rejects_tiny_class():
    x = np.random.default_rng(0).standard_normal((10, 2))
    y = np.array([1, 1] + [0] * 8)
    with pytest.raises(ValueError):
        dt.stratified_splits(x, y, np.random.default_rng(0))


LIBSVM_SAMPLE = """\
+1 1:0.5 3:-1.25
-1 2:2.0
# a comment line

+1 4:1.0
0 1:-0.5 2:0.25 4:3.5
1 2:1.5
"""


def test_load_libsvm_hand_transcribed(tmp_path):
    p = tmp_path / "sample.txt"
    p.write_text(LIBSVM_SAMPLE)
    x, y = dt.load_libsvm(p)
    assert x.shape == (5, 4)
    np.testing.assert_array_equal(y, [1, 0, 1, 0, 1])
    np.testing.assert_array_equal(x[0], [0.5, 0.0, -1.25, 0.0])
    np.testing.assert_array_equal(x[1], [0.0, 2.0, 0.0, 0.0])
    np.testing.assert_array_equal(x[2], [0.0, 0.0, 0.0, 1.0])
    np.testing.assert_array_equal(x[3], [-0.5, 0.25, 0.0, 3.5])
    np.testing.assert_array_equal(x[4], [0.0, 1.5, 0.0, 0.0])


@pytest.mark.parametrize("line,fragment", [
    ("+2 1:0.5", "label"),
    ("abc 1:0.5", "label"),
    ("+1 0:1.0", "index"),
    ("+1 1:xyz", "feature"),
    ("+1 nocolon", "feature"),
])
def test_load_libsvm_errors_name_the_line(tmp_path, line, fragment):
    p = tmp_path / "bad.txt"
    p.write_text("+1 1:1.0\n" + line + "\n")
    with pytest.raises(dt.DataFormatError) as exc:
        dt.load_libsvm(p)
    assert ":2:" in str(exc.value)
    assert fragment in str(exc.value)


def test_load_libsvm_empty_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("# nothing\n")
    with pytest.raises(dt.DataFormatError):
        dt.load_libsvm(p)


def test_class_balanced_batches_composition():
    rng = np.random.default_rng(33)
    y = np.array([1] * 3 + [0] * 97)
    batches = dt.class_balanced_batches(y, 5, 40, rng)
    assert len(batches) == 40
    for b in batches:
        assert b.size == 5
        assert int(y[b].sum()) == 3  # ceil(5/2) positives


def test_class_balanced_batches_deterministic_and_validated():
    y = np.array([0, 1, 0, 1])
    a = dt.class_balanced_batches(y, 4, 3, np.random.default_rng(5))
    b = dt.class_balanced_batches(y, 4, 3, np.random.default_rng(5))
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
    with pytest.raises(ValueError):
        dt.class_balanced_batches(np.zeros(4, dtype=int), 4, 1, np.random.default_rng(0))
