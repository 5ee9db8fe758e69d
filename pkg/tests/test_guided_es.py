"""Guided ES: covariance structure, estimator direction, query discipline, lam=0."""

import numpy as np
import pytest

from metricopt import guided_es as ges


def test_gradient_history_is_a_newest_first_ring():
    h = ges.GradientHistory(3, 2)
    for i in range(5):
        h.push(np.array([float(i), 0.0]))
    m = h.matrix()
    assert m.shape == (3, 2)
    np.testing.assert_array_equal(m[:, 0], [4.0, 3.0, 2.0])
    with pytest.raises(ValueError):
        h.push(np.zeros(3))


def test_orthonormal_basis_properties():
    rng = np.random.default_rng(91)
    vs = rng.standard_normal((3, 8))
    u = ges.orthonormal_basis(vs)
    assert u.shape == (8, 3)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)
    # spans the inputs: projecting onto the basis reconstructs them
    for v in vs:
        np.testing.assert_allclose(u @ (u.T @ v), v, atol=1e-10)


def test_orthonormal_basis_drops_dependent_vectors():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    u = ges.orthonormal_basis(np.stack([v, 2.0 * v, np.zeros(4)]))
    assert u.shape == (4, 1)
    # residual exactly at tolerance is dropped too
    w = v / np.linalg.norm(v)
    u2 = ges.orthonormal_basis(np.stack([v, v + 1e-11 * np.array([1.0, 0, 0, 0])]))
    assert u2.shape == (4, 1), "sub-tolerance residual must not widen the basis"
    assert ges.orthonormal_basis(np.zeros((2, 5))).shape == (5, 0)


def test_sigma_has_unit_trace():
    rng = np.random.default_rng(92)
    for k in (1, 2, 3):
        u = ges.orthonormal_basis(rng.standard_normal((k, 10)))
        d = 10
        sigma = np.eye(d) / (2 * d) + (u @ u.T) / (2 * u.shape[1])
        assert np.trace(sigma) == pytest.approx(1.0, rel=1e-12)


def test_perturbation_covariance_monte_carlo():
    rng = np.random.default_rng(93)
    d, k, s2 = 4, 2, 0.01
    u = ges.orthonormal_basis(rng.standard_normal((k, d)))
    n = 400_000
    deltas = ges.sample_perturbations(np.random.default_rng(94), u, d, n, s2)
    emp = deltas.T @ deltas / n
    want = s2 * (np.eye(d) / (2 * d) + (u @ u.T) / (2 * k))
    np.testing.assert_allclose(emp, want, atol=2e-4)
    assert np.trace(emp) == pytest.approx(s2, rel=0.02)


def test_perturbations_isotropic_without_subspace():
    d, s2 = 5, 0.01
    deltas = ges.sample_perturbations(np.random.default_rng(95), None, d, 200_000, s2)
    emp = deltas.T @ deltas / deltas.shape[0]
    np.testing.assert_allclose(emp, s2 * np.eye(d) / d, atol=2e-4)


def test_es_direction_recovers_linear_gradient():
    rng = np.random.default_rng(96)
    d = 6
    g = rng.standard_normal(d)
    u = ges.orthonormal_basis(np.stack([g + 0.1 * rng.standard_normal(d)
                                        for _ in range(3)]))
    s2 = 0.01
    deltas = ges.sample_perturbations(np.random.default_rng(97), u, d, 4000, s2)
    phi = rng.standard_normal(d)

    est = ges.es_direction(lambda q: q @ g + 0.7, phi, deltas, s2)
    sigma = np.eye(d) / (2 * d) + (u @ u.T) / (2 * u.shape[1])
    want = 2.0 * sigma @ g  # the estimator's expectation, constant included
    cos = est @ want / (np.linalg.norm(est) * np.linalg.norm(want))
    assert cos > 0.99
    assert np.linalg.norm(est) == pytest.approx(np.linalg.norm(want), rel=0.15)


def test_all_queries_in_one_batched_call():
    calls = []

    def probe(q):
        calls.append(np.array(q))
        return np.zeros(q.shape[0])

    rng = np.random.default_rng(98)
    state = ges.MetricOptState(4, rng, p=3)
    phi = rng.standard_normal(4)
    state.direction(probe, phi, loss_grad=rng.standard_normal(4))
    assert len(calls) == 1
    q = calls[0]
    assert q.shape == (6, 4)  # 2P rows
    np.testing.assert_allclose(q[:3] + q[3:], np.tile(2 * phi, (3, 1)), atol=1e-12)


def test_lam_zero_is_bitwise_inert():
    rng = np.random.default_rng(99)
    state = ges.MetricOptState(3, rng, lam=0.0)
    before = rng.bit_generator.state

    def boom(q):
        raise AssertionError("value function must not be queried at lam=0")

    g = np.array([0.5, -1.0, 2.0])
    out = state.direction(boom, np.zeros(3), loss_grad=g)
    assert out is g  # the very same array, not a copy
    assert rng.bit_generator.state == before
    assert len(state.history) == 0
    with pytest.raises(ValueError):
        state.direction(boom, np.zeros(3), loss_grad=None)


def test_direction_deterministic_given_seed():
    def f(q):
        return (q ** 2).sum(axis=1)

    outs = []
    for _ in range(2):
        state = ges.MetricOptState(4, np.random.default_rng(123), lam=0.5)
        phi = np.ones(4)
        g = np.array([1.0, 2.0, 3.0, 4.0])
        outs.append(state.direction(f, phi, loss_grad=g))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_metric_only_mode_scales_by_lam():
    def f(q):
        return q @ np.array([1.0, -1.0])

    a = ges.MetricOptState(2, np.random.default_rng(7), lam=1.0)
    b = ges.MetricOptState(2, np.random.default_rng(7), lam=2.0)
    ua = a.direction(f, np.zeros(2))
    ub = b.direction(f, np.zeros(2))
    np.testing.assert_allclose(ub, 2.0 * ua, rtol=1e-12)


def test_history_feeds_the_subspace():
    rng = np.random.default_rng(8)
    state = ges.MetricOptState(5, rng, k=2, p=3)
    g1 = np.array([1.0, 0, 0, 0, 0])
    state.direction(lambda q: np.zeros(q.shape[0]), np.zeros(5), loss_grad=g1)
    assert len(state.history) == 1
    g2 = np.array([0, 1.0, 0, 0, 0])
    state.direction(lambda q: np.zeros(q.shape[0]), np.zeros(5), loss_grad=g2)
    m = state.history.matrix()
    np.testing.assert_array_equal(m[0], g2)
    np.testing.assert_array_equal(m[1], g1)
