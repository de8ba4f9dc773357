"""Independent reference computations and the on-demand verification suite.

The references here deliberately take the slow, obvious route (dense
inverses of the textbook formulas) so that they share no code path with the
factored implementations they check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx

from . import model
from .kernels import KernelParams, se_kernel
from .mcmc import McmcConfig, geweke_joint_test
from .rand import rng_stream, sample_truncnorm

CHECKS = ("conditionals", "closed-form", "geweke", "tails")
GEWEKE_HYPER = model.HyperPriorConfig(
    sigma2_beta=4.0,
    sigma2=(6.0, 5.0),
    proposal_sd={name: 1.0 for name in model.SCALARS},
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# --------------------------------------------------------------------------
# dense references


def _dense_K(data, l, eta, factor):
    # the factored code works with K + jitter I; so does the reference
    K = se_kernel(data.X, data.X, KernelParams(l, eta))
    return K + factor.jitter * np.eye(data.n)


def dense_cond_beta(state, data, hp):
    Kf = model.prior_factor(data, state.l_mu, state.eta_mu, "mu")
    Kinv = np.linalg.inv(_dense_K(data, state.l_mu, state.eta_mu, Kf))
    H = data.design
    cov = np.linalg.inv(H.T @ Kinv @ H + np.eye(data.n_beta) / hp.sigma2_beta)
    return cov @ H.T @ Kinv @ state.mu, cov


def dense_cond_mu(state, data, hp):
    Kf = model.prior_factor(data, state.l_mu, state.eta_mu, "mu")
    Kinv = np.linalg.inv(_dense_K(data, state.l_mu, state.eta_mu, Kf))
    s2 = model.noise_var(state, data)
    r = model.working_response(state, data) - state.delta * data.a
    cov = np.linalg.inv(Kinv + np.eye(data.n) / s2)
    return cov @ (r / s2 + Kinv @ data.design @ state.beta), cov


def dense_cond_delta(state, data, hp):
    Kf = model.prior_factor(data, state.l_delta, state.eta_delta, "delta")
    Kinv = np.linalg.inv(_dense_K(data, state.l_delta, state.eta_delta, Kf))
    s2 = model.noise_var(state, data)
    D = np.diag(data.a)
    r = model.working_response(state, data) - state.mu
    cov = np.linalg.inv(Kinv + D @ D / s2)
    return cov @ D @ r / s2, cov


DENSE = {"beta": dense_cond_beta, "mu": dense_cond_mu, "delta": dense_cond_delta}


def two_subject_cov(sigma2, eta, length_scale, distance):
    """Closed-form posterior covariance of (Delta_1, Delta_2) when only subject 1 is treated."""
    rho = math.exp(-0.5 * (distance / length_scale) ** 2)
    e2 = eta * eta
    v1 = sigma2 * e2 / (sigma2 + e2)
    v2 = e2 * (1.0 - e2 * rho * rho / (sigma2 + e2))
    c12 = sigma2 * e2 * rho / (sigma2 + e2)
    return np.array([[v1, c12], [c12, v2]])


def truncnorm_mean(mean, sd, lower):
    """Mean of N(mean, sd^2) truncated to (lower, inf), stable far in the tail."""
    alpha = (lower - mean) / sd
    # phi(alpha) / (1 - Phi(alpha)) written with the scaled complementary error function
    hazard = math.sqrt(2.0 / math.pi) / erfcx(alpha / math.sqrt(2.0))
    return mean + sd * hazard


def random_fixture(rng, n=None, kind="continuous", max_cond=1e4):
    """A small random dataset and state whose kernels are well conditioned.

    Near-duplicate covariate rows make ``K`` so ill-conditioned that a dense
    float64 inverse is itself only accurate to ``cond(K) * eps``; such draws
    are rejected so the reference stays trustworthy at the 1e-9 level.
    """
    n = int(rng.integers(2, 6)) if n is None else n
    P = int(rng.integers(1, 3))
    while True:
        a = rng.integers(0, 2, n).astype(float)
        if 0 < a.sum() < n:
            break
    l_mu, l_delta = (float(v) for v in rng.uniform(0.3, 1.0, 2))
    while True:
        X = rng.normal(0.0, 1.5, size=(n, P))
        conds = [np.linalg.cond(se_kernel(X, X, KernelParams(l, 1.0))) for l in (l_mu, l_delta)]
        if max(conds) < max_cond:
            break
    if kind == "binary":
        y = rng.integers(0, 2, n).astype(float)
    else:
        y = rng.normal(0.0, 2.0, n)
    data = model.Dataset(y, a, X, kind)
    z = None
    if kind == "binary":
        z = np.where(y == 1, 1.0, -1.0) * rng.exponential(1.0, n)
    state = model.ParamState(
        mu=rng.normal(0, 1, n),
        delta=rng.normal(0, 1, n),
        beta=rng.normal(0, 1, data.n_beta),
        l_mu=l_mu,
        eta_mu=float(rng.uniform(0.5, 2.0)),
        l_delta=l_delta,
        eta_delta=float(rng.uniform(0.5, 2.0)),
        sigma2=float(rng.uniform(0.3, 2.0)) if kind == "continuous" else 1.0,
        z=z,
    )
    hp = model.HyperPriorConfig(sigma2_beta=float(rng.uniform(0.5, 50.0)))
    return state, data, hp


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def conditional_errors(state, data, hp) -> dict:
    """Max relative error of mean and covariance for each block against the dense reference."""
    out = {}
    for name in model.BLOCKS:
        cond = getattr(model, f"cond_{name}")(state, data, hp)
        m_ref, c_ref = DENSE[name](state, data, hp)
        out[name] = max(_rel_err(cond.mean, m_ref), _rel_err(cond.cov, c_ref))
    return out


# --------------------------------------------------------------------------
# checks


def check_conditionals(n_fixtures=50, seed=0, tol=1e-9):
    rng = rng_stream(seed, 101)
    worst = dict.fromkeys(model.BLOCKS, 0.0)
    for i in range(n_fixtures):
        kind = "binary" if i % 5 == 4 else "continuous"
        errs = conditional_errors(*random_fixture(rng, n=2 + i % 4, kind=kind))
        worst = {k: max(worst[k], errs[k]) for k in worst}
    ok = all(v <= tol for v in worst.values())
    return ok, "max relative error " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())


def closed_form_grid(n_params=100, n_dist=50, seed=0):
    """Return (max abs error vs closed form, whether Var(Delta_2) rises with distance on every line)."""
    rng = rng_stream(seed, 102)
    worst, monotone = 0.0, True
    hp = model.HyperPriorConfig()
    for _ in range(n_params):
        sigma2 = float(rng.uniform(0.1, 3.0))
        eta = float(rng.uniform(0.3, 2.0))
        l = float(rng.uniform(0.3, 2.0))
        var2 = []
        for d in l * np.linspace(0.05, 4.0, n_dist):
            data = model.Dataset([0.0, 0.0], [1.0, 0.0], np.array([[0.0], [d]]))
            state = model.ParamState(
                mu=np.zeros(2), delta=np.zeros(2), beta=np.zeros(2),
                l_delta=l, eta_delta=eta, sigma2=sigma2,
            )
            cov = model.cond_delta(state, data, hp).cov
            worst = max(worst, float(np.max(np.abs(cov - two_subject_cov(sigma2, eta, l, d)))))
            var2.append(cov[1, 1])
        monotone &= bool(np.all(np.diff(var2) > 0))
    return worst, monotone


def check_closed_form(tol=1e-10, seed=0):
    worst, monotone = closed_form_grid(seed=seed)
    return worst <= tol and monotone, f"max abs error {worst:.2e}; Var(Delta_2) increasing: {monotone}"


def check_geweke(sweeps=50_000, seed=0, bound=4.0):
    cfg = McmcConfig(n_burnin=1000, n_kept_iterations=sweeps, thin=1, adapt=False)
    rep = geweke_joint_test(10, GEWEKE_HYPER, cfg, rng_stream(seed, 103), bound=bound)
    return rep.passed, "z " + ", ".join(f"{k}={v:+.2f}" for k, v in rep.z.items())


def check_tails(n_draws=100_000, seed=0):
    rng = rng_stream(seed, 104)
    problems = []
    for m in (5.0, 10.0, 40.0, 200.0):
        # far below the support: mean -m, truncated to (0, inf)
        x = sample_truncnorm(-m, 1.0, 0.0, np.inf, rng=rng, size=n_draws)
        if not (np.all(np.isfinite(x)) and np.all(x > 0)):
            problems.append(f"lower-tail draws out of support at mean -{m:g}")
            continue
        ref = truncnorm_mean(-m, 1.0, 0.0)
        se = np.std(x, ddof=1) / math.sqrt(n_draws)
        if abs(x.mean() - ref) > 5 * se:
            problems.append(f"mean {x.mean():.4g} vs {ref:.4g} at mean -{m:g}")
        # mirror image: mean +m truncated to (-inf, 0)
        x = sample_truncnorm(m, 1.0, -np.inf, 0.0, rng=rng, size=n_draws)
        if not (np.all(np.isfinite(x)) and np.all(x < 0)):
            problems.append(f"upper-tail draws out of support at mean {m:g}")
    # adversarial random intervals
    mean = rng.normal(0, 50, n_draws)
    sd = np.exp(rng.uniform(-5, 3, n_draws))
    lo = rng.normal(0, 50, n_draws)
    hi = lo + np.exp(rng.uniform(-8, 4, n_draws))
    x = sample_truncnorm(mean, sd, lo, hi, rng=rng)
    if not (np.all(x > lo) and np.all(x < hi)):
        problems.append(f"{int(np.sum(~((x > lo) & (x < hi))))} adversarial draws outside their interval")
    return not problems, "; ".join(problems) or "all tail draws finite, in bounds and on the reference mean"


def run_checks(only=None, seed=0, geweke_sweeps=50_000) -> list[CheckResult]:
    """Run the named checks (all by default) and time each."""
    names = CHECKS if not only else tuple(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown check(s) {unknown}; choose from {', '.join(CHECKS)}")
    fns = {
        "conditionals": lambda: check_conditionals(seed=seed),
        "closed-form": lambda: check_closed_form(seed=seed),
        "geweke": lambda: check_geweke(sweeps=geweke_sweeps, seed=seed),
        "tails": lambda: check_tails(seed=seed),
    }
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            ok, detail = fns[name]()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
