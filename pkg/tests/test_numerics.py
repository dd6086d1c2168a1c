import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankexperts.numerics import (NotPositiveDefiniteError, cholesky_lower, frobenius,
                                  solve_lower_triangular, svd)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
shapes = st.tuples(st.integers(1, 7), st.integers(1, 7))


def test_svd_diagonal():
    r = svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(r.sigma, [3, 2, 1])
    np.testing.assert_allclose(np.abs(r.U), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(np.abs(r.V), np.eye(3), atol=1e-12)


def test_svd_zero_matrix():
    r = svd(np.zeros((2, 3)))
    np.testing.assert_array_equal(r.sigma, [0, 0])
    np.testing.assert_allclose(r.U.T @ r.U, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(r.V.T @ r.V, np.eye(2), atol=1e-12)


def test_svd_reconstruction_seeded():
    M = np.random.default_rng(0).normal(size=(4, 4))
    r = svd(M)
    assert frobenius(r.U * r.sigma @ r.V.T - M) / frobenius(M) <= 1e-10


def test_svd_sign_convention():
    M = np.random.default_rng(1).normal(size=(6, 4))
    r = svd(M)
    piv = np.argmax(np.abs(r.U), axis=0)
    assert np.all(r.U[piv, np.arange(4)] > 0)
    r2 = svd(M.copy())
    np.testing.assert_array_equal(r.U, r2.U)


@pytest.mark.parametrize("bad", [np.array([1.0, 2.0]), np.array([[np.nan, 1.0]]), np.zeros((0, 3))])
def test_svd_rejects(bad):
    with pytest.raises(ValueError):
        svd(bad)


@settings(max_examples=60, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite)))
def test_svd_invariants(M):
    r = svd(M)
    k = r.rank_max
    assert np.all(np.diff(r.sigma) <= 1e-12) and np.all(r.sigma >= 0)
    np.testing.assert_allclose(r.U.T @ r.U, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(r.V.T @ r.V, np.eye(k), atol=1e-10)
    assert frobenius(r.U * r.sigma @ r.V.T - M) <= 1e-8 * max(frobenius(M), 1e-300)


@settings(max_examples=60, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite)), st.integers(0, 7))
def test_eckart_young_residual(M, r):
    res = svd(M)
    r = min(r, res.rank_max)
    lhs = frobenius(M - res.truncated(r)) ** 2
    rhs = float(np.sum(res.sigma[r:] ** 2))
    assert abs(lhs - rhs) <= 1e-8 * max(rhs, 1e-12 * frobenius(M) ** 2, 1e-300)


def test_cholesky_examples():
    np.testing.assert_array_equal(cholesky_lower(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(cholesky_lower(np.diag([4.0, 1.0])), np.diag([2.0, 1.0]))
    G = np.random.default_rng(2).normal(size=(5, 5))
    P = G @ G.T + np.eye(5)
    L = cholesky_lower(P)
    assert np.allclose(L, np.tril(L))
    assert frobenius(L @ L.T - P) <= 1e-8 * frobenius(P)


def test_cholesky_errors():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_lower(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="square"):
        cholesky_lower(np.ones((2, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        cholesky_lower(np.array([[2.0, 1.0], [0.0, 2.0]]))


def test_solve_examples():
    B = np.random.default_rng(3).normal(size=(4, 2))
    np.testing.assert_array_equal(solve_lower_triangular(np.eye(4), B), B)
    np.testing.assert_allclose(solve_lower_triangular(np.diag([2.0, 1.0]), np.array([2.0, 3.0])), [1, 3])
    L = np.tril(np.random.default_rng(4).normal(size=(5, 5))) + 5 * np.eye(5)
    Y = np.random.default_rng(5).normal(size=(5, 3))
    np.testing.assert_allclose(L @ solve_lower_triangular(L, Y), Y, atol=1e-12)
    np.testing.assert_allclose(L.T @ solve_lower_triangular(L, Y, transpose=True), Y, atol=1e-12)


def test_solve_errors():
    with pytest.raises(ValueError, match="singular"):
        solve_lower_triangular(np.diag([1.0, 0.0]), np.ones(2))
    with pytest.raises(ValueError, match="incompatible"):
        solve_lower_triangular(np.eye(3), np.ones(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_cholesky_solve_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n, n))
    L = cholesky_lower(G @ G.T + n * np.eye(n))
    Y = rng.normal(size=(n, 2))
    got = solve_lower_triangular(L, L @ Y)
    assert frobenius(got - Y) <= 1e-9 * frobenius(Y)
