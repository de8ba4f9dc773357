import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpcausal.kernels import (
    KernelParams,
    NotPositiveDefiniteError,
    PDMatrix,
    chol_factor,
    pd_half_solve,
    pd_logdet,
    pd_solve,
    se_kernel,
    sq_dist,
)


# --- se_kernel ---------------------------------------------------------------


def test_diagonal_is_amplitude_squared():
    K = se_kernel(np.array([[0.3, -1.2]]), np.array([[0.3, -1.2]]), KernelParams(1.5, 2.0))
    assert K.shape == (1, 1)
    assert K[0, 0] == 4.0


def test_unit_distance_entry():
    K = se_kernel(np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]]), KernelParams(1.0, 1.0))
    assert K[0, 1] == pytest.approx(0.606530659, abs=1e-9)
    assert K[0, 1] == pytest.approx(math.exp(-0.5), rel=1e-15)


def test_entry_vanishes_at_large_distance():
    d = np.array([1.0, 5.0, 20.0, 100.0])
    K = se_kernel(np.zeros((1, 1)), d[:, None], KernelParams(1.0, 1.0)).ravel()
    assert np.all(np.diff(K) < 0) or np.all(K[2:] == 0)
    assert K[-1] == 0.0


def test_element_formula_with_shared_length_scale():
    rng = np.random.default_rng(3)
    X, Xs = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    l, eta = 0.7, 1.3
    K = se_kernel(X, Xs, KernelParams(l, eta))
    for i in range(4):
        for j in range(5):
            ref = eta**2 * math.exp(-0.5 * sum(((X[i, p] - Xs[j, p]) / l) ** 2 for p in range(3)))
            assert K[i, j] == pytest.approx(ref, rel=1e-13)


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError, match="dimension mismatch"):
        se_kernel(np.zeros((2, 2)), np.zeros((2, 3)), KernelParams(1.0, 1.0))


def test_non_finite_covariate_raises():
    X = np.array([[0.0], [np.nan]])
    with pytest.raises(ValueError, match="non-finite"):
        se_kernel(X, X, KernelParams(1.0, 1.0))


@pytest.mark.parametrize("l, eta", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, np.inf)])
def test_kernel_params_must_be_positive(l, eta):
    with pytest.raises(ValueError):
        KernelParams(l, eta)


@settings(max_examples=60, deadline=None)
@given(
    X=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)), elements=st.floats(-5, 5)),
    l=st.floats(0.05, 10),
    eta=st.floats(0.05, 10),
)
def test_gram_matrix_symmetric_with_constant_diagonal(X, l, eta):
    K = se_kernel(X, X, KernelParams(l, eta))
    assert np.array_equal(K, K.T)
    assert np.allclose(np.diag(K), eta**2, rtol=1e-15)
    assert np.all(K <= eta**2) and np.all(K >= 0)


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(-3, 3),
    d1=st.floats(0.0, 3.0),
    step=st.floats(0.01, 2.0),
    l=st.floats(0.3, 5),
)
def test_entries_decrease_with_coordinate_distance(x, d1, step, l):
    base = np.array([[x, 0.5]])
    near = np.array([[x + d1, 0.5]])
    far = np.array([[x + d1 + step, 0.5]])
    p = KernelParams(l, 1.0)
    assert se_kernel(base, far, p)[0, 0] < se_kernel(base, near, p)[0, 0]


def test_sq_dist_matches_direct_sum():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 2))
    D = sq_dist(X)
    assert np.allclose(D, ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    assert np.all(np.diag(D) == 0)


# --- chol_factor ---------------------------------------------------------------


def test_identity_factors_without_jitter():
    F = chol_factor(np.eye(3))
    assert F.jitter == 0.0
    assert np.array_equal(F.factor, np.eye(3))


def test_rank_deficient_matrix_needs_jitter():
    M = np.ones((2, 2))
    F = chol_factor(M)
    assert F.jitter > 0
    L = F.factor
    assert np.allclose(L @ L.T, M + F.jitter * np.eye(2), atol=1e-14)
    # jitter follows the documented ladder 1e-10 * mean(diag) * 10**k
    k = math.log10(F.jitter / 1e-10)
    assert abs(k - round(k)) < 1e-9 and 0 <= round(k) <= 5


def test_indefinite_matrix_raises_with_jitter():
    M = np.diag([1.0, -1e6])
    with pytest.raises(NotPositiveDefiniteError, match="not positive definite") as exc:
        chol_factor(M)
    assert exc.value.jitter > 0


def test_non_square_rejected():
    with pytest.raises(ValueError):
        chol_factor(np.ones((2, 3)))


def test_pdmatrix_scaling_is_lazy_and_consistent():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    M = A @ A.T + 4 * np.eye(4)
    F = chol_factor(M)
    G = F.scaled(3.0)
    assert np.allclose(G.matrix, 9 * M)
    assert np.allclose(G.factor @ G.factor.T, 9 * M)
    assert G.unit_factor is F.unit_factor
    assert pd_logdet(G) == pytest.approx(np.linalg.slogdet(9 * M)[1], rel=1e-12)


# --- pd_solve / pd_logdet -----------------------------------------------------


def test_solve_and_logdet_of_scaled_identity():
    n = 5
    F = chol_factor(2.0 * np.eye(n))
    assert np.allclose(pd_solve(F, np.eye(n)), 0.5 * np.eye(n), atol=0)
    assert pd_logdet(F) == pytest.approx(n * math.log(2.0), abs=1e-14)


def test_random_spd_residual():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(4, 4))
    M = A @ A.T + 0.5 * np.eye(4)
    B = rng.normal(size=(4, 3))
    X = pd_solve(chol_factor(M), B)
    assert np.linalg.norm(M @ X - B) < 1e-10


def test_solve_uses_the_jittered_matrix():
    M = np.ones((2, 2))
    F = chol_factor(M)
    B = np.array([1.0, 2.0])
    X = pd_solve(F, B)
    assert np.allclose((M + F.jitter * np.eye(2)) @ X, B, rtol=1e-6, atol=1e-6)


def test_solve_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        pd_solve(chol_factor(np.eye(3)), np.ones(2))


def test_half_solve_gives_quadratic_form():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(5, 5))
    M = A @ A.T + np.eye(5)
    b = rng.normal(size=5)
    w = pd_half_solve(chol_factor(M), b)
    assert w @ w == pytest.approx(b @ np.linalg.solve(M, b), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(d=arrays(np.float64, st.integers(1, 8), elements=st.floats(1e-3, 1e3)))
def test_logdet_of_diagonal_is_sum_of_logs(d):
    assert pd_logdet(chol_factor(np.diag(d))) == pytest.approx(float(np.sum(np.log(d))), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    n=st.integers(1, 8),
    shift=st.floats(1e-3, 10.0),
)
def test_solve_relative_residual(seed, n, shift):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    M = A @ A.T + shift * np.eye(n)
    B = rng.normal(size=(n, 2))
    F = chol_factor(M)
    X = pd_solve(F, B)
    Mj = M + F.jitter * np.eye(n)
    assert np.linalg.norm(Mj @ X - B) <= 1e-9 * np.linalg.norm(Mj) * np.linalg.norm(X) + 1e-12


def test_pdmatrix_apply_matches_factor():
    F = chol_factor(np.array([[2.0, 0.5], [0.5, 1.0]])).scaled(1.5)
    z = np.array([0.3, -0.7])
    assert np.allclose(F.apply(z), F.factor @ z)
    assert isinstance(F, PDMatrix)
