"""GP outcome model: data and state containers, log posterior, Gibbs conditionals.

The outcome model is ``y = mu(X) + Delta(X) * a + eps`` with independent GP
priors ``mu ~ GP(design @ beta, K_mu)`` and ``Delta ~ GP(0, K_Delta)``, both
squared-exponential in the covariates only. In binary mode the latent probit
variable ``z`` stands in for ``y`` and the noise variance is fixed at one.

Prior covariances are factored as ``eta * chol(R(l))`` where ``R`` is the
correlation matrix, so the jitter chosen for a given length scale does not
depend on the amplitude.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import (
    PDMatrix,
    SqrtCovariance,
    chol_factor,
    pd_half_solve,
    pd_logdet,
    pd_solve,
    se_from_sqdist,
    sq_dist,
)
from .rand import gamma_logpdf, invgamma_logpdf, mvn_logpdf, normal_logpdf

SCALARS = ("l_mu", "eta_mu", "l_delta", "eta_delta", "sigma2")
BLOCKS = ("beta", "mu", "delta")
MODES = ("continuous", "binary")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcomes ``y``, treatment indicators ``a`` and covariates ``X``.

    ``X`` is expected to be already standardized (see
    :func:`gpcausal.io.standardize_covariates`). ``design`` prepends an
    intercept column and is the regressor matrix of the prior mean.
    """

    y: np.ndarray
    a: np.ndarray
    X: np.ndarray
    kind: str = "continuous"
    design: np.ndarray = field(init=False, repr=False)
    _sqdist: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = y.shape[0]
        if self.kind not in MODES:
            raise ValueError(f"kind must be one of {MODES}, got {self.kind!r}")
        if n < 2:
            raise ValueError("need at least two subjects")
        if a.shape[0] != n or X.shape[0] != n:
            raise ValueError(f"length mismatch: y={n}, a={a.shape[0]}, X={X.shape[0]}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("data contain non-finite values")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("treatment indicators must be 0/1")
        if a.sum() in (0, n):
            raise ValueError("both treatment arms must be present")
        if self.kind == "binary" and not np.all((y == 0) | (y == 1)):
            raise ValueError("binary outcomes must be 0/1")
        for name, val in (("y", y), ("a", a), ("X", X)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        design = np.column_stack([np.ones(n), X])
        design.setflags(write=False)
        object.__setattr__(self, "design", design)

    @property
    def sqdist(self) -> np.ndarray:
        """Pairwise squared covariate distances, computed on first use (O(n^2) memory)."""
        if self._sqdist is None:
            d2 = sq_dist(self.X)
            d2.setflags(write=False)
            object.__setattr__(self, "_sqdist", d2)
        return self._sqdist

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_beta(self) -> int:
        return self.design.shape[1]

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.a == 1)


@dataclass(frozen=True)
class HyperPriorConfig:
    """Fixed prior constants and MH proposal scales.

    Gamma pairs are (shape, rate); the ``sigma2`` pair is inverse-gamma
    (shape, scale).
    """

    sigma2_beta: float = 100.0
    l_mu: tuple = (2.0, 1.0)
    eta_mu: tuple = (2.0, 1.0)
    l_delta: tuple = (2.0, 1.0)
    eta_delta: tuple = (2.0, 1.0)
    sigma2: tuple = (2.0, 1.0)
    proposal_sd: dict = field(
        default_factory=lambda: {name: 0.3 for name in SCALARS}
    )

    def __post_init__(self):
        if not self.sigma2_beta > 0:
            raise ValueError("sigma2_beta must be positive")
        for name in SCALARS:
            pair = tuple(float(v) for v in getattr(self, name))
            if len(pair) != 2 or not all(v > 0 for v in pair):
                raise ValueError(f"prior for {name} needs two positive constants, got {pair}")
            object.__setattr__(self, name, pair)
        sd = {name: 0.3 for name in SCALARS}
        sd.update({k: float(v) for k, v in self.proposal_sd.items()})
        if set(sd) != set(SCALARS) or not all(v > 0 for v in sd.values()):
            raise ValueError(f"bad proposal scales: {self.proposal_sd}")
        object.__setattr__(self, "proposal_sd", sd)

    def to_dict(self) -> dict:
        out = {"sigma2_beta": self.sigma2_beta}
        for name in SCALARS:
            out[name] = list(getattr(self, name))
        out["proposal_sd"] = dict(self.proposal_sd)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HyperPriorConfig":
        kw = dict(d)
        for name in SCALARS:
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)


@dataclass(frozen=True)
class ParamState:
    mu: np.ndarray
    delta: np.ndarray
    beta: np.ndarray
    l_mu: float = 1.0
    eta_mu: float = 1.0
    l_delta: float = 1.0
    eta_delta: float = 1.0
    sigma2: float = 1.0
    z: np.ndarray | None = None

    def with_(self, **changes) -> "ParamState":
        return replace(self, **changes)

    def scalars(self) -> dict:
        return {name: getattr(self, name) for name in SCALARS}


@dataclass(frozen=True)
class ConditionalMVN:
    """Mean and factored covariance of a Gaussian full conditional."""

    mean: np.ndarray
    factor: PDMatrix | SqrtCovariance

    @property
    def cov(self) -> np.ndarray:
        return self.factor.matrix

    def logpdf(self, x) -> float:
        F = self.factor if isinstance(self.factor, PDMatrix) else chol_factor(self.cov)
        return mvn_logpdf(x, self.mean, F)


class FactorCache:
    """Memoizes correlation-matrix factors by (function, length scale).

    Used by the sampler so that a proposal evaluated in the MH step is not
    refactored in the following Gibbs step. Counts factorizations that needed
    jitter.
    """

    def __init__(self, maxsize: int = 8):
        self._store: OrderedDict = OrderedDict()
        self.maxsize = maxsize
        self.jitter_events = 0

    def get(self, key, build):
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            return hit
        val = build()
        if val.jitter > 0:
            self.jitter_events += 1
        self._store[key] = val
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return val


def correlation_factor(data: Dataset, length_scale: float, which: str = "mu", cache: FactorCache | None = None) -> PDMatrix:
    build = lambda: chol_factor(se_from_sqdist(data.sqdist, length_scale, 1.0))
    if cache is None:
        return build()
    return cache.get((which, float(length_scale)), build)


def prior_factor(data: Dataset, length_scale: float, amplitude: float, which: str = "mu", cache: FactorCache | None = None) -> PDMatrix:
    """Factored SE prior covariance ``K(l, eta)`` on the observed covariates."""
    return correlation_factor(data, length_scale, which, cache).scaled(amplitude)


def working_response(state: ParamState, data: Dataset) -> np.ndarray:
    if data.kind == "binary":
        if state.z is None:
            raise ValueError("binary mode requires latent z in the state")
        return state.z
    return data.y


def noise_var(state: ParamState, data: Dataset) -> float:
    return 1.0 if data.kind == "binary" else state.sigma2


def loglik(state: ParamState, data: Dataset, sigma2: float | None = None) -> float:
    """Gaussian log likelihood of the working response (``y``, or ``z`` in binary mode)."""
    s2 = noise_var(state, data) if sigma2 is None else sigma2
    if not s2 > 0:
        return -np.inf
    r = working_response(state, data)
    if data.kind == "binary":
        # z must agree in sign with the observed outcome
        if np.any((r > 0) != (data.y == 1)):
            return -np.inf
    resid = r - state.mu - state.delta * data.a
    return float(np.sum(normal_logpdf(resid, 0.0, np.sqrt(s2))))


def mu_prior_logpdf(state: ParamState, data: Dataset, K: PDMatrix) -> float:
    return mvn_logpdf(state.mu, data.design @ state.beta, K)


def delta_prior_logpdf(state: ParamState, K: PDMatrix) -> float:
    return mvn_logpdf(state.delta, 0.0, K)


def delta_marginal_loglik(state: ParamState, data: Dataset, K: PDMatrix) -> float:
    """Log likelihood of the treated working residuals with ``Delta`` integrated out.

    With ``r = y - mu`` (``z - mu`` in binary mode), the treated residuals
    are ``N(0, K_TT + s2 I)``. Control residuals do not involve ``Delta``
    and are omitted, so only differences in ``K`` are meaningful.
    """
    T = data.treated
    L_T = K.factor[T]
    s2 = noise_var(state, data)
    M = chol_factor(L_T @ L_T.T + s2 * np.eye(T.size))
    r = (working_response(state, data) - state.mu)[T]
    w = pd_half_solve(M, r)
    return float(-0.5 * (w @ w) - 0.5 * pd_logdet(M) - 0.5 * T.size * math.log(2.0 * math.pi))


def scalar_prior_logpdf(name: str, value: float, hp: HyperPriorConfig) -> float:
    if name == "sigma2":
        return invgamma_logpdf(value, *hp.sigma2)
    return gamma_logpdf(value, *getattr(hp, name))


def log_joint_terms(state: ParamState, data: Dataset, hp: HyperPriorConfig) -> dict:
    """Each additive term of the unnormalized log posterior, normalizing constants included."""
    names = SCALARS if data.kind == "continuous" else SCALARS[:-1]
    terms = {f"prior_{name}": scalar_prior_logpdf(name, getattr(state, name), hp) for name in names}
    terms["prior_beta"] = float(np.sum(normal_logpdf(state.beta, 0.0, np.sqrt(hp.sigma2_beta))))
    if not all(np.isfinite(terms[f"prior_{name}"]) for name in names):
        # out-of-support hyperparameters: kernel terms are undefined
        terms.update(likelihood=-np.inf, prior_mu=-np.inf, prior_delta=-np.inf)
        return terms
    terms["likelihood"] = loglik(state, data)
    Kmu = prior_factor(data, state.l_mu, state.eta_mu, "mu")
    Kdelta = prior_factor(data, state.l_delta, state.eta_delta, "delta")
    terms["prior_mu"] = mu_prior_logpdf(state, data, Kmu)
    terms["prior_delta"] = delta_prior_logpdf(state, Kdelta)
    return terms


def log_joint(state: ParamState, data: Dataset, hp: HyperPriorConfig) -> float:
    """Unnormalized log joint posterior of all parameters (and ``z`` in binary mode)."""
    return float(sum(log_joint_terms(state, data, hp).values()))


def cond_beta(state: ParamState, data: Dataset, hp: HyperPriorConfig, cache: FactorCache | None = None) -> ConditionalMVN:
    K = prior_factor(data, state.l_mu, state.eta_mu, "mu", cache)
    H = data.design
    W = pd_solve(K, H)
    precision = H.T @ W + np.eye(data.n_beta) / hp.sigma2_beta
    P = chol_factor(precision)
    mean = pd_solve(P, W.T @ state.mu)
    cov = pd_solve(P, np.eye(data.n_beta))
    return ConditionalMVN(mean, chol_factor(0.5 * (cov + cov.T)))


def _posterior_sqrt(K: PDMatrix, rows, s2: float) -> SqrtCovariance:
    """Covariance with precision ``K^-1 + D / s2``, ``D`` the 0/1 diagonal selecting ``rows``.

    Returned as ``L (I + L_r' L_r / s2)^-1 L'`` where ``L_r`` holds the
    selected rows of the prior factor.
    """
    Lr = K.unit_factor[rows]
    inner = (K.scale**2 / s2) * (Lr.T @ Lr)
    inner[np.diag_indices_from(inner)] += 1.0
    return SqrtCovariance(K, chol_factor(inner))


def _posterior_mean(S: SqrtCovariance, rhs_white) -> np.ndarray:
    # L (U U')^-1 rhs_white
    L = S.inner.factor
    w = solve_triangular(L, rhs_white, lower=True, check_finite=False)
    return S.outer.apply(solve_triangular(L, w, lower=True, trans="T", check_finite=False))


def cond_mu(state: ParamState, data: Dataset, hp: HyperPriorConfig, cache: FactorCache | None = None) -> ConditionalMVN:
    """Full conditional of ``mu``.

    Precision ``K^-1 + I / s2``, mean ``cov (r / s2 + K^-1 design beta)``
    with ``r = y - Delta a``. ``K`` is never inverted explicitly.
    """
    K = prior_factor(data, state.l_mu, state.eta_mu, "mu", cache)
    s2 = noise_var(state, data)
    r = working_response(state, data) - state.delta * data.a
    S = _posterior_sqrt(K, slice(None), s2)
    # K^-1 m = L^-T L^-1 m, so L' (r / s2 + K^-1 m) = L' r / s2 + L^-1 m
    rhs = (K.scale / s2) * (K.unit_factor.T @ r) + pd_half_solve(K, data.design @ state.beta)
    return ConditionalMVN(_posterior_mean(S, rhs), S)


def cond_delta(state: ParamState, data: Dataset, hp: HyperPriorConfig, cache: FactorCache | None = None) -> ConditionalMVN:
    """Full conditional of ``Delta``.

    Precision ``K^-1 + D_a / s2`` (only treated subjects carry information
    about their effect), mean ``cov D_a (r / s2)`` with ``r = y - mu``.
    """
    K = prior_factor(data, state.l_delta, state.eta_delta, "delta", cache)
    s2 = noise_var(state, data)
    T = data.treated
    r = (working_response(state, data) - state.mu)[T]
    S = _posterior_sqrt(K, T, s2)
    rhs = (K.scale / s2) * (K.unit_factor[T].T @ r)
    return ConditionalMVN(_posterior_mean(S, rhs), S)


CONDITIONALS = {"beta": cond_beta, "mu": cond_mu, "delta": cond_delta}


def default_state(data: Dataset) -> ParamState:
    """Starting values: beta 0, mu at the outcome mean (0 for binary), Delta 0, l = eta = 1."""
    n = data.n
    if data.kind == "binary":
        z = np.where(data.y == 1, 0.5, -0.5)
        return ParamState(mu=np.zeros(n), delta=np.zeros(n), beta=np.zeros(data.n_beta), sigma2=1.0, z=z)
    s2 = float(np.var(data.y, ddof=1))
    if not s2 > 0:
        s2 = 1.0
    return ParamState(
        mu=np.full(n, float(np.mean(data.y))),
        delta=np.zeros(n),
        beta=np.zeros(data.n_beta),
        sigma2=s2,
    )


def draw_from_prior(data: Dataset, hp: HyperPriorConfig, rng: np.random.Generator) -> ParamState:
    """Draw every parameter from its prior (``z`` too in binary mode)."""
    kw = {}
    for name in SCALARS[:-1]:
        shape, rate = getattr(hp, name)
        kw[name] = float(rng.gamma(shape, 1.0 / rate))
    if data.kind == "continuous":
        shape, scale = hp.sigma2
        kw["sigma2"] = float(scale / rng.gamma(shape, 1.0))
    else:
        kw["sigma2"] = 1.0
    beta = np.sqrt(hp.sigma2_beta) * rng.standard_normal(data.n_beta)
    Kmu = prior_factor(data, kw["l_mu"], kw["eta_mu"], "mu")
    Kdelta = prior_factor(data, kw["l_delta"], kw["eta_delta"], "delta")
    mu = data.design @ beta + Kmu.factor @ rng.standard_normal(data.n)
    delta = Kdelta.factor @ rng.standard_normal(data.n)
    state = ParamState(mu=mu, delta=delta, beta=beta, **kw)
    if data.kind == "binary":
        state = state.with_(z=mu + delta * data.a + rng.standard_normal(data.n))
    return state


def simulate_outcome(state: ParamState, data: Dataset, rng: np.random.Generator) -> Dataset:
    """Redraw the outcome given the parameters, keeping ``a`` and ``X``."""
    m = state.mu + state.delta * data.a
    y = m + np.sqrt(noise_var(state, data)) * rng.standard_normal(data.n)
    if data.kind == "binary":
        y = (y > 0).astype(float)
    return Dataset(y, data.a, data.X, data.kind)
