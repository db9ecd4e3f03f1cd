import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aotmem.numkernel import (NumericalError, log_softmax, logsumexp, lstsq_min_norm, numeric_rank, pinv,
                              polyfit_ls, softmax, spawn, svd)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_svd_identity():
    r = svd(np.eye(3))
    assert np.allclose(r.singular_values, [1, 1, 1])
    assert r.numeric_rank == 3


def test_svd_diagonal():
    assert np.allclose(svd(np.diag([3.0, 2.0])).singular_values, [3, 2])


def test_svd_outer_product_rank_one():
    rng = np.random.default_rng(0)
    assert svd(np.outer(rng.normal(size=5), rng.normal(size=5))).numeric_rank == 1


@pytest.mark.parametrize("shape", [(1, 1), (7, 3), (3, 7), (50, 50), (200, 200)])
def test_svd_reconstruction_and_orthonormality(shape):
    m = np.random.default_rng(1).normal(size=shape)
    r = svd(m)
    assert np.linalg.norm(r.reconstruct() - m) <= 1e-8 * r.sigma_max
    k = len(r.singular_values)
    assert np.allclose(r.U.T @ r.U, np.eye(k), atol=1e-8)
    assert np.allclose(r.Vt @ r.Vt.T, np.eye(k), atol=1e-8)
    assert np.all(np.diff(r.singular_values) <= 0)


def test_svd_rejects_nonfinite_and_bad_tol():
    with pytest.raises(ValueError):
        svd(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        svd(np.eye(2), tol=0)


def test_numeric_rank_is_relative():
    assert numeric_rank(np.array([1e6, 1e-1])) == 2
    assert numeric_rank(np.array([1e6, 1e-3])) == 1
    assert numeric_rank(np.array([1e6, 1e-3]), tol=1e-10) == 2
    assert numeric_rank(np.array([1.0, 1e-9])) == 1
    assert numeric_rank(np.zeros(3)) == 0


def test_lstsq_identity():
    B = np.random.default_rng(2).normal(size=(4, 3))
    assert np.allclose(lstsq_min_norm(np.eye(4), B), B)


def test_lstsq_mean_of_targets():
    assert np.allclose(lstsq_min_norm([[1.0], [1.0]], [[0.0], [2.0]]), [[1.0]])


def test_lstsq_square_consistent():
    rng = np.random.default_rng(3)
    A, X0 = rng.normal(size=(6, 6)), rng.normal(size=(6, 2))
    X = lstsq_min_norm(A, A @ X0)
    assert np.linalg.norm(A @ X - A @ X0) <= 1e-10


def test_lstsq_minimum_norm_on_underdetermined():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 8))
    b = rng.normal(size=3)
    x = lstsq_min_norm(A, b)
    # oracle: the minimum-norm solution lies in the row space
    ref = A.T @ np.linalg.solve(A @ A.T, b)
    assert np.allclose(x, ref, atol=1e-10)


def test_lstsq_dimension_mismatch():
    with pytest.raises(ValueError):
        lstsq_min_norm(np.eye(3), np.ones((2, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_lstsq_recovers_consistent_systems(m, n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    X0 = rng.normal(size=(n, 2))
    X = lstsq_min_norm(A, A @ X0)
    assert np.linalg.norm(A @ X - A @ X0) <= 1e-8 * max(1.0, np.linalg.norm(A @ X0))


def test_pinv_matches_numpy():
    m = np.random.default_rng(5).normal(size=(4, 6))
    assert np.allclose(pinv(m), np.linalg.pinv(m), atol=1e-10)


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)
    e = math.e
    assert np.allclose(softmax([0.0, 1.0]), [1 / (1 + e), e / (1 + e)], atol=1e-12)
    assert np.allclose(softmax([0.0, 1.0]), [0.26894, 0.73106], atol=1e-5)
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-400


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_normalized_and_shift_invariant(v, c):
    p = softmax(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.allclose(softmax(v + c), p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_log_softmax_consistent(v):
    assert np.allclose(np.exp(log_softmax(v)), softmax(v), atol=1e-12)
    assert logsumexp(v) == pytest.approx(math.log(sum(math.exp(x) for x in v)), rel=1e-12, abs=1e-12)


def test_polyfit_exact_linear():
    xs = np.arange(6.0)
    f = polyfit_ls(xs, 2 * xs + 1, "linear")
    assert np.allclose(f.coefficients, [1, 2], atol=1e-8)
    assert f.residual_norm <= 1e-10
    assert f.r_squared == pytest.approx(1.0)


def test_polyfit_affine_quadratic():
    xs = np.array([1.0, 2, 3, 5])
    f = polyfit_ls(xs, 3 * xs ** 2, "affine_quadratic")
    b, a = f.coefficients
    assert a == pytest.approx(3, abs=1e-8) and b == pytest.approx(0, abs=1e-8)


def test_polyfit_cubic_exact():
    xs = np.linspace(-2, 3, 9)
    f = polyfit_ls(xs, 1 - xs + 0.5 * xs ** 2 + 2 * xs ** 3, "cubic")
    assert np.allclose(f.coefficients, [1, -1, 0.5, 2], atol=1e-8)


def test_polyfit_matches_normal_equations():
    rng = np.random.default_rng(6)
    xs = np.linspace(0, 10, 30)
    ys = 0.3 * xs + 2 + rng.normal(scale=0.5, size=xs.size)
    f = polyfit_ls(xs, ys, "quadratic_in_x")
    X = np.stack([np.ones_like(xs), xs, xs ** 2], 1)
    coef = np.linalg.solve(X.T @ X, X.T @ ys)
    res = np.linalg.norm(ys - X @ coef)
    assert np.allclose(f.coefficients, coef, atol=1e-8)
    assert f.residual_norm == pytest.approx(res, abs=1e-8)
    ss_tot = ((ys - ys.mean()) ** 2).sum()
    assert f.r_squared == pytest.approx(1 - res ** 2 / ss_tot, abs=1e-10)
    assert 0 <= f.r_squared <= 1


def test_polyfit_degenerate():
    with pytest.raises(NumericalError):
        polyfit_ls([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        polyfit_ls([1.0, 2.0], [1.0, 2.0], "cubic")
    with pytest.raises(ValueError):
        polyfit_ls([1.0, 2.0], [1.0, 2.0], "exponential")


def test_spawn_streams_independent_and_reproducible():
    a = [g.random(3) for g in spawn(7, 3)]
    b = [g.random(3) for g in spawn(7, 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])
