import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcausal import oracle
from gpcausal.kernels import KernelParams, se_kernel
from gpcausal.model import (
    Dataset,
    HyperPriorConfig,
    ParamState,
    cond_beta,
    cond_delta,
    cond_mu,
    default_state,
    draw_from_prior,
    log_joint,
    log_joint_terms,
    simulate_outcome,
)
from gpcausal.rand import rng_stream


def _state(n, q, **kw):
    base = dict(mu=np.zeros(n), delta=np.zeros(n), beta=np.zeros(q))
    base.update(kw)
    return ParamState(**base)


# --- Dataset ---------------------------------------------------------------------


def test_dataset_builds_design_with_intercept():
    d = Dataset([1.0, 2.0, 3.0], [0, 1, 1], [[0.5], [1.5], [-1.0]])
    assert d.design.shape == (3, 2)
    assert np.all(d.design[:, 0] == 1.0)
    assert d.n == 3 and d.n_beta == 2
    assert list(d.treated) == [1, 2]


@pytest.mark.parametrize(
    "y, a, X, kind, msg",
    [
        ([1.0], [1], [[0.0]], "continuous", "at least two"),
        ([1.0, 2.0], [1, 1], [[0.0], [1.0]], "continuous", "both treatment arms"),
        ([1.0, 2.0], [0, 0], [[0.0], [1.0]], "continuous", "both treatment arms"),
        ([1.0, np.nan], [0, 1], [[0.0], [1.0]], "continuous", "non-finite"),
        ([1.0, 2.0], [0, 2], [[0.0], [1.0]], "continuous", "0/1"),
        ([1.0, 2.0], [0, 1], [[0.0], [1.0]], "binary", "0/1"),
        ([1.0, 2.0], [0, 1], [[0.0]], "continuous", "length mismatch"),
    ],
)
def test_dataset_invariants(y, a, X, kind, msg):
    with pytest.raises(ValueError, match=msg):
        Dataset(y, a, X, kind)


def test_dataset_arrays_are_read_only():
    d = Dataset([1.0, 2.0], [0, 1], [[0.0], [1.0]])
    with pytest.raises(ValueError):
        d.y[0] = 5.0


def test_hyperprior_validation():
    with pytest.raises(ValueError):
        HyperPriorConfig(sigma2_beta=0.0)
    with pytest.raises(ValueError):
        HyperPriorConfig(l_mu=(2.0, -1.0))
    with pytest.raises(ValueError):
        HyperPriorConfig(proposal_sd={"l_mu": 0.0})
    hp = HyperPriorConfig(eta_delta=(3.0, 2.0), proposal_sd={"sigma2": 0.1})
    assert HyperPriorConfig.from_dict(hp.to_dict()) == hp


# --- log_joint -----------------------------------------------------------


def _hand_log_joint(state, y, a, x, hp):
    """Every term written out with scalar arithmetic for two subjects and one covariate."""
    lg = lambda v, s, r: s * math.log(r) - math.lgamma(s) + (s - 1) * math.log(v) - r * v
    lig = lambda v, s, b: s * math.log(b) - math.lgamma(s) - (s + 1) * math.log(v) - b / v

    def mvn2(r1, r2, l, eta):
        rho = math.exp(-0.5 * ((x[0] - x[1]) / l) ** 2)
        det = eta**4 * (1 - rho**2)
        q = (r1 * r1 - 2 * rho * r1 * r2 + r2 * r2) / (eta**2 * (1 - rho**2))
        return -0.5 * q - 0.5 * math.log(det) - math.log(2 * math.pi)

    s2 = state.sigma2
    total = 0.0
    for i in range(2):
        e = y[i] - state.mu[i] - state.delta[i] * a[i]
        total += -0.5 * math.log(2 * math.pi * s2) - e * e / (2 * s2)
    b0, b1 = state.beta
    m1, m2 = b0 + b1 * x[0], b0 + b1 * x[1]
    total += mvn2(state.mu[0] - m1, state.mu[1] - m2, state.l_mu, state.eta_mu)
    total += mvn2(state.delta[0], state.delta[1], state.l_delta, state.eta_delta)
    for b in (b0, b1):
        total += -0.5 * math.log(2 * math.pi * hp.sigma2_beta) - b * b / (2 * hp.sigma2_beta)
    total += lg(state.l_mu, *hp.l_mu) + lg(state.eta_mu, *hp.eta_mu)
    total += lg(state.l_delta, *hp.l_delta) + lg(state.eta_delta, *hp.eta_delta)
    total += lig(s2, *hp.sigma2)
    return total


def test_log_joint_matches_scalar_hand_computation():
    # two subjects is the smallest valid dataset (both arms must be present)
    y, a, x = [1.3, -0.4], [1.0, 0.0], [0.2, 1.1]
    data = Dataset(y, a, np.array(x)[:, None])
    hp = HyperPriorConfig(sigma2_beta=7.0, l_mu=(2.5, 1.5), eta_delta=(3.0, 0.5), sigma2=(3.0, 2.0))
    state = ParamState(
        mu=np.array([0.4, -0.2]), delta=np.array([0.9, 0.3]), beta=np.array([0.1, -0.5]),
        l_mu=0.8, eta_mu=1.4, l_delta=1.7, eta_delta=0.6, sigma2=0.45,
    )
    assert log_joint(state, data, hp) == pytest.approx(_hand_log_joint(state, y, a, x, hp), abs=1e-10)


def test_likelihood_invariant_to_common_shift():
    rng = rng_stream(1)
    state, data, hp = oracle.random_fixture(rng, n=5)
    c = 3.7
    shifted = Dataset(data.y + c, data.a, data.X)
    t0 = log_joint_terms(state, data, hp)["likelihood"]
    t1 = log_joint_terms(state.with_(mu=state.mu + c), shifted, hp)["likelihood"]
    assert t1 == pytest.approx(t0, abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_nonpositive_sigma2_gives_minus_infinity(bad):
    state, data, hp = oracle.random_fixture(rng_stream(2), n=3)
    assert log_joint(state.with_(sigma2=bad), data, hp) == -np.inf


def test_nonpositive_length_scale_gives_minus_infinity():
    state, data, hp = oracle.random_fixture(rng_stream(2), n=3)
    assert log_joint(state.with_(l_mu=-0.5), data, hp) == -np.inf


def test_binary_log_joint_requires_sign_consistent_z():
    state, data, hp = oracle.random_fixture(rng_stream(3), n=4, kind="binary")
    assert np.isfinite(log_joint(state, data, hp))
    assert "prior_sigma2" not in log_joint_terms(state, data, hp)
    flipped = state.with_(z=-state.z)
    assert log_joint(flipped, data, hp) == -np.inf


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 30), binary=st.booleans())
def test_default_state_has_finite_log_joint(seed, n, binary):
    rng = np.random.default_rng(seed)
    a = np.arange(n) % 2
    X = rng.normal(size=(n, 2)) * rng.uniform(0.01, 10)
    y = (rng.uniform(size=n) < 0.5).astype(float) if binary else rng.normal(0, rng.uniform(0.01, 100), n)
    data = Dataset(y, a, X, "binary" if binary else "continuous")
    terms = log_joint_terms(default_state(data), data, HyperPriorConfig())
    assert all(np.isfinite(v) for v in terms.values()), terms


def test_default_state_values():
    data = Dataset([1.0, 3.0, 5.0], [0, 1, 0], [[0.0], [1.0], [2.0]])
    s = default_state(data)
    assert np.all(s.mu == 3.0) and np.all(s.delta == 0) and np.all(s.beta == 0)
    assert s.l_mu == s.eta_mu == s.l_delta == s.eta_delta == 1.0
    assert s.sigma2 == pytest.approx(4.0)
    b = default_state(Dataset([1.0, 0.0], [0, 1], [[0.0], [1.0]], "binary"))
    assert np.all(b.mu == 0) and b.sigma2 == 1.0
    assert np.all((b.z > 0) == (np.array([1.0, 0.0]) == 1))


# --- cond_beta ----------------------------------------------------------


def test_beta_mean_zero_when_mu_zero():
    state, data, hp = oracle.random_fixture(rng_stream(4), n=4)
    c = cond_beta(state.with_(mu=np.zeros(4)), data, hp)
    assert np.allclose(c.mean, 0.0, atol=1e-14)


def test_beta_mean_tends_to_gls_when_prior_is_flat():
    rng = rng_stream(5)
    X = np.array([[-1.0], [0.3], [1.6]])
    data = Dataset([0.0, 1.0, 2.0], [0, 1, 0], X)
    state = _state(3, 2, mu=rng.normal(size=3), l_mu=0.7, eta_mu=1.2)
    K = se_kernel(X, X, KernelParams(0.7, 1.2))
    H = data.design
    Ki = np.linalg.inv(K)
    gls = np.linalg.solve(H.T @ Ki @ H, H.T @ Ki @ state.mu)
    c = cond_beta(state, data, HyperPriorConfig(sigma2_beta=1e12))
    assert np.allclose(c.mean, gls, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("block", ["beta", "mu", "delta"])
@pytest.mark.parametrize("seed", range(5))
def test_conditionals_match_dense_inverse_at_n4(block, seed):
    state, data, hp = oracle.random_fixture(rng_stream(6, seed), n=4)
    cond = {"beta": cond_beta, "mu": cond_mu, "delta": cond_delta}[block](state, data, hp)
    m_ref, c_ref = oracle.DENSE[block](state, data, hp)
    assert np.allclose(cond.mean, m_ref, rtol=1e-9, atol=1e-12)
    assert np.allclose(cond.cov, c_ref, rtol=1e-9, atol=1e-12)


# --- cond_mu -----------------------------------------------------------


def test_mu_mean_reverts_to_prior_mean_for_huge_noise():
    state, data, hp = oracle.random_fixture(rng_stream(7), n=4)
    c = cond_mu(state.with_(sigma2=1e12), data, hp)
    assert np.allclose(c.mean, data.design @ state.beta, atol=1e-9)


def test_mu_scalar_precision_weighting_with_diagonal_kernel():
    # covariates so far apart (relative to l) that K is exactly kappa * I
    X = np.array([[0.0], [100.0], [200.0], [300.0]])
    y = np.array([1.0, -2.0, 0.5, 3.0])
    a = np.array([1.0, 0.0, 1.0, 0.0])
    data = Dataset(y, a, X)
    eta, s2 = 1.3, 0.7
    kappa = eta**2
    state = _state(4, 2, delta=np.array([0.4, 9.0, -1.0, 2.0]), beta=np.array([0.2, 0.01]),
                   l_mu=0.5, eta_mu=eta, sigma2=s2)
    c = cond_mu(state, data, HyperPriorConfig())
    xb = data.design @ state.beta
    ref = ((y - state.delta * a) / s2 + xb / kappa) / (1 / s2 + 1 / kappa)
    assert np.allclose(c.mean, ref, rtol=1e-12)
    assert np.allclose(c.cov, np.eye(4) / (1 / s2 + 1 / kappa), atol=1e-14)


# --- cond_delta ----------------------------------------------------------


def test_two_subject_closed_form_identical_covariates():
    data = Dataset([0.0, 0.0], [1.0, 0.0], [[0.5], [0.5]])
    state = _state(2, 2, l_delta=1.0, eta_delta=1.0, sigma2=1.0)
    cov = cond_delta(state, data, HyperPriorConfig()).cov
    # K is singular here, so a tiny jitter is involved
    assert np.allclose(cov, [[0.5, 0.5], [0.5, 0.5]], atol=1e-8)
    assert np.allclose(cov, oracle.dense_cond_delta(state, data, HyperPriorConfig())[1], atol=1e-8)


def test_unidentified_subject_recovers_prior_variance():
    hp = HyperPriorConfig()
    for eta in (0.5, 1.0, 2.0):
        data = Dataset([0.0, 0.0], [1.0, 0.0], [[0.0], [1e3]])
        state = _state(2, 2, l_delta=1.0, eta_delta=eta, sigma2=1.0)
        assert cond_delta(state, data, hp).cov[1, 1] == pytest.approx(eta**2, rel=1e-12)


def test_two_subject_grid_matches_closed_form_and_is_monotone():
    worst, monotone = oracle.closed_form_grid(n_params=20, n_dist=25, seed=1)
    assert worst < 1e-10
    assert monotone


def test_delta_variance_bounded_by_prior_amplitude():
    for seed in range(10):
        state, data, hp = oracle.random_fixture(rng_stream(8, seed), n=5)
        cov = cond_delta(state, data, hp).cov
        assert np.all(np.diag(cov) <= state.eta_delta**2 + 1e-9)


@pytest.mark.parametrize("block", ["beta", "mu", "delta"])
def test_covariances_are_symmetric(block):
    state, data, hp = oracle.random_fixture(rng_stream(9), n=5)
    cov = {"beta": cond_beta, "mu": cond_mu, "delta": cond_delta}[block](state, data, hp).cov
    assert np.allclose(cov, cov.T, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("block", ["beta", "mu", "delta"])
@pytest.mark.parametrize("kind", ["continuous", "binary"])
@pytest.mark.parametrize("seed", range(4))
def test_conditional_density_differs_from_log_joint_by_a_constant(block, kind, seed):
    rng = rng_stream(10, seed)
    state, data, hp = oracle.random_fixture(rng, n=2 + seed, kind=kind)
    cond = {"beta": cond_beta, "mu": cond_mu, "delta": cond_delta}[block](state, data, hp)
    dim = cond.mean.shape[0]
    x1, x2 = rng.normal(size=dim), rng.normal(size=dim)
    s1, s2 = state.with_(**{block: x1}), state.with_(**{block: x2})
    d_joint = log_joint(s1, data, hp) - log_joint(s2, data, hp)
    d_cond = cond.logpdf(x1) - cond.logpdf(x2)
    assert d_joint == pytest.approx(d_cond, abs=1e-8)


# --- prior simulation ----------------------------------------------------


def test_draw_from_prior_and_simulate_outcome_are_valid():
    rng = rng_stream(11)
    data = Dataset(np.zeros(6), np.arange(6) % 2, rng.normal(size=(6, 1)))
    hp = HyperPriorConfig()
    s = draw_from_prior(data, hp, rng)
    assert all(getattr(s, k) > 0 for k in ("l_mu", "eta_mu", "l_delta", "eta_delta", "sigma2"))
    new = simulate_outcome(s, data, rng)
    assert np.array_equal(new.X, data.X) and np.array_equal(new.a, data.a)
    bdata = Dataset(np.arange(6) % 2, np.arange(6) % 2, data.X, "binary")
    bs = draw_from_prior(bdata, hp, rng)
    assert bs.sigma2 == 1.0 and bs.z is not None
    assert set(np.unique(simulate_outcome(bs, bdata, rng).y)) <= {0.0, 1.0}
