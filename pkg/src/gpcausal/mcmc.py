"""Metropolis-within-Gibbs sampler for the GP causal model.

One sweep, in order::

    l_mu (MH) -> eta_mu (MH) -> beta (Gibbs) -> mu (Gibbs)
    -> l_delta (MH) -> eta_delta (MH) -> Delta (Gibbs) -> sigma2 (MH)

Each step conditions on the values already updated earlier in the same
sweep. Binary mode prepends a latent ``z`` draw and drops the ``sigma2``
step. MH proposals are normals truncated below at zero, so the acceptance
ratio carries the Hastings correction for the unequal truncation masses.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .kernels import NotPositiveDefiniteError
from .model import (
    CONDITIONALS,
    SCALARS,
    Dataset,
    FactorCache,
    HyperPriorConfig,
    ParamState,
    default_state,
    delta_marginal_loglik,
    delta_prior_logpdf,
    draw_from_prior,
    log_joint_terms,
    loglik,
    mu_prior_logpdf,
    prior_factor,
    scalar_prior_logpdf,
    simulate_outcome,
)
from .probit import risk_difference_draw, sample_latent_z
from .rand import rng_stream, sample_mvn, sample_truncnorm, truncnorm_logpdf

log = logging.getLogger(__name__)

TAU_BOUNDS = (1e-4, 10.0)
CONTINUOUS_ORDER = ("l_mu", "eta_mu", "beta", "mu", "l_delta", "eta_delta", "delta", "sigma2")
BINARY_ORDER = ("z", "l_mu", "eta_mu", "beta", "mu", "l_delta", "eta_delta", "delta")


class McmcError(RuntimeError):
    pass


class InitializationError(McmcError):
    pass


@dataclass(frozen=True)
class McmcConfig:
    n_burnin: int = 10_000
    n_kept_iterations: int = 5_000
    thin: int = 5
    n_chains: int = 1
    adapt: bool = True
    target_accept: float = 0.35
    accept_band: tuple = (0.1, 0.6)
    seed: int = 0
    conjugate_sigma2: bool = False
    collapse_delta: bool = False

    def __post_init__(self):
        if self.n_burnin < 0 or self.n_kept_iterations < 1 or self.thin < 1 or self.n_chains < 1:
            raise ValueError(f"invalid MCMC counts: {self}")
        lo, hi = self.accept_band
        if not (0 < lo < self.target_accept < hi < 1):
            raise ValueError("acceptance target and band must lie inside (0, 1)")
        object.__setattr__(self, "accept_band", (float(lo), float(hi)))

    @property
    def n_draws(self) -> int:
        return self.n_kept_iterations // self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accept_band"] = list(self.accept_band)
        return d


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in draws, possibly pooled over chains.

    ``psi`` is the per-draw average treatment effect: the subject mean of
    ``delta`` (continuous) or ``p1 - p0`` (binary).
    """

    mode: str
    chain: np.ndarray
    iteration: np.ndarray
    psi: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    beta: np.ndarray
    hyper: dict
    p1: np.ndarray | None = None
    p0: np.ndarray | None = None

    def __len__(self) -> int:
        return self.psi.shape[0]

    @classmethod
    def pool(cls, parts: list["PosteriorDraws"]) -> "PosteriorDraws":
        if not parts:
            raise ValueError("nothing to pool")
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        binary = parts[0].mode == "binary"
        return cls(
            mode=parts[0].mode,
            chain=cat("chain"),
            iteration=cat("iteration"),
            psi=cat("psi"),
            mu=cat("mu"),
            delta=cat("delta"),
            beta=cat("beta"),
            hyper={k: np.concatenate([p.hyper[k] for p in parts]) for k in parts[0].hyper},
            p1=cat("p1") if binary else None,
            p0=cat("p0") if binary else None,
        )


@dataclass
class ChainResult:
    chain_id: int
    draws: PosteriorDraws
    acceptance: dict
    acceptance_burnin: dict
    proposal_sd: dict
    jitter_events: int = 0
    rejected_proposals: int = 0
    wall_time: float = 0.0

    def diagnostics(self) -> dict:
        return {
            "chain": self.chain_id,
            "acceptance": self.acceptance,
            "acceptance_burnin": self.acceptance_burnin,
            "proposal_sd": self.proposal_sd,
            "jitter_events": self.jitter_events,
            "rejected_proposals": self.rejected_proposals,
            "wall_time": self.wall_time,
        }


def _partial_log_post(name, value, state, data, hp, cache, collapse_delta=False):
    """Terms of the log joint that involve the scalar ``name``, evaluated at ``value``.

    Differences of this quantity equal differences of the full log joint.
    With ``collapse_delta`` the ``l_delta``/``eta_delta`` targets integrate
    ``Delta`` out instead of conditioning on it.
    """
    prior = scalar_prior_logpdf(name, value, hp)
    if not np.isfinite(prior):
        return -np.inf
    if name == "sigma2":
        return prior + loglik(state, data, sigma2=value)
    if name in ("l_mu", "eta_mu"):
        l = value if name == "l_mu" else state.l_mu
        eta = value if name == "eta_mu" else state.eta_mu
        return prior + mu_prior_logpdf(state, data, prior_factor(data, l, eta, "mu", cache))
    l = value if name == "l_delta" else state.l_delta
    eta = value if name == "eta_delta" else state.eta_delta
    K = prior_factor(data, l, eta, "delta", cache)
    if collapse_delta:
        return prior + delta_marginal_loglik(state, data, K)
    return prior + delta_prior_logpdf(state, K)


def mh_log_ratio(name, proposal, state, data, hp, tau, cache=None, hastings=True, collapse_delta=False) -> float:
    """``log r`` for moving scalar ``name`` from its current value to ``proposal``."""
    current = getattr(state, name)
    new = _partial_log_post(name, proposal, state, data, hp, cache, collapse_delta)
    if not np.isfinite(new):
        return -np.inf
    log_r = new - _partial_log_post(name, current, state, data, hp, cache, collapse_delta)
    if hastings:
        log_r += truncnorm_logpdf(current, proposal, tau, 0.0) - truncnorm_logpdf(proposal, current, tau, 0.0)
    return float(log_r)


def mh_step_scalar(name, state, data, hp, tau, rng, cache=None, hastings=True, collapse_delta=False):
    """One truncated-normal random-walk MH update of a positive scalar.

    Returns ``(state, accepted)``. A proposal whose covariance cannot be
    factored is rejected. ``hastings=False`` drops the proposal-density
    correction and exists only as a mutation canary for the Geweke test.
    ``collapse_delta=True`` updates ``l_delta``/``eta_delta`` against the
    likelihood with ``Delta`` integrated out; this is only valid when the
    ``Delta`` block is redrawn before anything else conditions on it, as in
    the standard sweep.
    """
    if name not in SCALARS:
        raise ValueError(f"unknown scalar parameter {name!r}")
    if not tau > 0:
        raise ValueError("proposal scale must be positive")
    proposal = sample_truncnorm(getattr(state, name), tau, 0.0, np.inf, rng=rng)
    log_u = math.log(rng.uniform())
    try:
        log_r = mh_log_ratio(name, proposal, state, data, hp, tau, cache, hastings, collapse_delta)
    except NotPositiveDefiniteError as exc:
        log.debug("rejecting %s=%g: %s", name, proposal, exc)
        return state, None
    if log_u <= log_r:
        return state.with_(**{name: float(proposal)}), True
    return state, False


def gibbs_step_block(name, state, data, hp, rng, cache=None):
    """Replace block ``name`` (beta, mu or delta) by a draw from its full conditional."""
    try:
        cond = CONDITIONALS[name](state, data, hp, cache)
    except KeyError:
        raise ValueError(f"unknown block {name!r}") from None
    except NotPositiveDefiniteError as exc:
        raise McmcError(f"{name} conditional could not be factored (jitter {exc.jitter:.3g})") from exc
    return state.with_(**{name: sample_mvn(cond.mean, cond.factor, rng)})


def conjugate_sigma2_step(state, data, hp, rng):
    """Exact inverse-gamma draw of sigma2; an alternative to the MH step."""
    shape, scale = hp.sigma2
    resid = data.y - state.mu - state.delta * data.a
    a_post = shape + 0.5 * data.n
    b_post = scale + 0.5 * float(resid @ resid)
    return state.with_(sigma2=float(b_post / rng.gamma(a_post, 1.0)))


class _Sweeper:
    """Holds the per-chain mutable pieces: proposal scales, counters, factor cache."""

    def __init__(self, hp, mode, adapt=False, target=0.35, conjugate_sigma2=False, hastings=True,
                 collapse_delta=False):
        self.hp = hp
        self.order = BINARY_ORDER if mode == "binary" else CONTINUOUS_ORDER
        self.mh_names = [s for s in self.order if s in SCALARS]
        self.tau = {k: hp.proposal_sd[k] for k in self.mh_names}
        self.adapt = adapt
        self.target = target
        self.conjugate_sigma2 = conjugate_sigma2
        self.hastings = hastings
        self.collapse_delta = collapse_delta
        self.cache = FactorCache()
        self.rejected = 0
        self.reset_counts()
        self._adapt_steps = 0

    def reset_counts(self):
        self.proposed = dict.fromkeys(self.mh_names, 0)
        self.accepted = dict.fromkeys(self.mh_names, 0)

    def rates(self):
        return {k: self.accepted[k] / self.proposed[k] if self.proposed[k] else float("nan") for k in self.mh_names}

    def sweep(self, state, data, rng, on_step=None):
        gain = None
        if self.adapt:
            self._adapt_steps += 1
            gain = self._adapt_steps ** -0.6
        for name in self.order:
            before = state
            if name == "z":
                state = state.with_(z=sample_latent_z(state, data, rng))
            elif name in CONDITIONALS:
                state = gibbs_step_block(name, state, data, self.hp, rng, self.cache)
            elif name == "sigma2" and self.conjugate_sigma2:
                state = conjugate_sigma2_step(state, data, self.hp, rng)
            else:
                state, acc = mh_step_scalar(
                    name, state, data, self.hp, self.tau[name], rng, self.cache, self.hastings,
                    self.collapse_delta,
                )
                if acc is None:
                    self.rejected += 1
                    acc = False
                self.proposed[name] += 1
                self.accepted[name] += acc
                if gain is not None:
                    t = self.tau[name] * math.exp(gain * (acc - self.target))
                    self.tau[name] = min(max(t, TAU_BOUNDS[0]), TAU_BOUNDS[1])
            if on_step is not None:
                on_step(name, before, state)
        return state


def overdispersed_state(data: Dataset, rng: np.random.Generator) -> ParamState:
    """Default starting values with each free scalar multiplied by U(0.5, 2)."""
    state = default_state(data)
    names = SCALARS if data.kind == "continuous" else SCALARS[:-1]
    return state.with_(**{k: getattr(state, k) * rng.uniform(0.5, 2.0) for k in names})


def _check_initial(state, data, hp):
    terms = log_joint_terms(state, data, hp)
    bad = [k for k, v in terms.items() if not np.isfinite(v)]
    if bad:
        raise InitializationError(f"log posterior is not finite at the initial values; offending terms: {bad}")


def run_chain(
    data: Dataset,
    hp: HyperPriorConfig,
    config: McmcConfig,
    rng: np.random.Generator,
    mode: str | None = None,
    chain_id: int = 0,
    init: ParamState | None = None,
    on_step: Callable | None = None,
    hastings: bool = True,
) -> ChainResult:
    """Run one chain: ``n_burnin`` adaptive sweeps, then ``n_kept_iterations`` sweeps keeping every ``thin``-th.

    Proposal scales adapt (Robbins-Monro on ``log tau`` toward
    ``config.target_accept``) only during burn-in.
    """
    mode = mode or data.kind
    if mode != data.kind:
        raise ValueError(f"mode {mode!r} does not match dataset kind {data.kind!r}")
    t0 = time.perf_counter()
    if init is None:
        init = default_state(data) if chain_id == 0 else overdispersed_state(data, rng)
    state = init
    _check_initial(state, data, hp)

    sw = _Sweeper(hp, mode, adapt=config.adapt, target=config.target_accept,
                  conjugate_sigma2=config.conjugate_sigma2, hastings=hastings,
                  collapse_delta=config.collapse_delta)
    for _ in range(config.n_burnin):
        state = sw.sweep(state, data, rng, on_step)
    burn_rates = sw.rates()
    sw.reset_counts()
    sw.adapt = False

    J = config.n_draws
    n, q = data.n, data.n_beta
    mu = np.empty((J, n))
    delta = np.empty((J, n))
    beta = np.empty((J, q))
    hyper = {k: np.empty(J) for k in SCALARS}
    psi = np.empty(J)
    p1 = np.empty(J) if mode == "binary" else None
    p0 = np.empty(J) if mode == "binary" else None
    iteration = np.empty(J, dtype=int)
    j = 0
    for it in range(1, config.n_kept_iterations + 1):
        state = sw.sweep(state, data, rng, on_step)
        if it % config.thin or j >= J:
            continue
        mu[j], delta[j], beta[j] = state.mu, state.delta, state.beta
        for k in SCALARS:
            hyper[k][j] = getattr(state, k)
        if mode == "binary":
            rd = risk_difference_draw(state, data)
            p1[j], p0[j] = rd.p1, rd.p0
            psi[j] = rd.rd
        else:
            psi[j] = float(np.mean(state.delta))
        iteration[j] = config.n_burnin + it
        j += 1

    draws = PosteriorDraws(mode, np.full(J, chain_id), iteration, psi, mu, delta, beta, hyper, p1, p0)
    return ChainResult(
        chain_id=chain_id,
        draws=draws,
        acceptance=sw.rates(),
        acceptance_burnin=burn_rates,
        proposal_sd=dict(sw.tau),
        jitter_events=sw.cache.jitter_events,
        rejected_proposals=sw.rejected,
        wall_time=time.perf_counter() - t0,
    )


def _chain_job(args):
    data, hp, config, mode, stream, chain_id = args
    rng = rng_stream(config.seed, *stream, chain_id)
    return run_chain(data, hp, config, rng, mode=mode, chain_id=chain_id)


def run_chains(data, hp, config, mode=None, stream=(), workers=None) -> list[ChainResult]:
    """Run ``config.n_chains`` chains on streams ``(seed, *stream, chain_id)``."""
    from .parallel import pmap

    jobs = [(data, hp, config, mode, tuple(stream), c) for c in range(config.n_chains)]
    return pmap(_chain_job, jobs, workers)


@dataclass
class GewekeReport:
    z: dict
    marginal_mean: dict
    successive_mean: dict
    n_marginal: int
    n_successive: int
    bound: float = 4.0

    @property
    def passed(self) -> bool:
        return all(abs(v) < self.bound for v in self.z.values())


def _batch_means_var(x, n_batches=50):
    """Variance of the mean of an autocorrelated series by non-overlapping batch means."""
    b = len(x) // n_batches
    if b < 1:
        return np.var(x, ddof=1) / len(x)
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return np.var(means, ddof=1) / n_batches


def geweke_joint_test(n, hp, config, rng, n_covariates=1, hastings=True, bound=4.0) -> GewekeReport:
    """Compare marginal-conditional and successive-conditional simulators.

    The marginal-conditional sample draws every parameter from the prior.
    The successive-conditional chain alternates a full sampler sweep with
    a fresh outcome draw given the current parameters; it has the prior as
    its stationary law exactly when the sweep leaves the posterior invariant.
    Reports a z-score per scalar hyperparameter (batch-means standard error
    on the chain side).
    """
    n_sc = config.n_kept_iterations // config.thin
    if n_sc < 2:
        raise ValueError("insufficient draws for the Geweke test")
    X = rng.uniform(-2.0, 2.0, size=(n, n_covariates))
    a = np.arange(n) % 2
    data = Dataset(np.zeros(n), a, X)

    mc = {k: np.empty(n_sc) for k in SCALARS}
    for i in range(n_sc):
        s = draw_from_prior(data, hp, rng)
        for k in SCALARS:
            mc[k][i] = getattr(s, k)

    sw = _Sweeper(hp, "continuous", hastings=hastings, conjugate_sigma2=config.conjugate_sigma2,
                  collapse_delta=config.collapse_delta)
    state = draw_from_prior(data, hp, rng)
    data = simulate_outcome(state, data, rng)
    for _ in range(config.n_burnin):
        state = sw.sweep(state, data, rng)
        data = simulate_outcome(state, data, rng)
    sc = {k: np.empty(n_sc) for k in SCALARS}
    j = 0
    for it in range(1, config.n_kept_iterations + 1):
        state = sw.sweep(state, data, rng)
        data = simulate_outcome(state, data, rng)
        if it % config.thin == 0 and j < n_sc:
            for k in SCALARS:
                sc[k][j] = getattr(state, k)
            j += 1

    z = {}
    for k in SCALARS:
        se2 = np.var(mc[k], ddof=1) / n_sc + _batch_means_var(sc[k])
        z[k] = float((mc[k].mean() - sc[k].mean()) / math.sqrt(se2))
    return GewekeReport(
        z=z,
        marginal_mean={k: float(v.mean()) for k, v in mc.items()},
        successive_mean={k: float(v.mean()) for k, v in sc.items()},
        n_marginal=n_sc,
        n_successive=n_sc,
        bound=bound,
    )
