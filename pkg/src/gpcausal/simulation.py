"""Data-generating processes, baselines and the replication harness.

Families
--------
``linear-Y1``, ``nonlinear-Y2``
    A ~ Bernoulli(.5); treated X1 ~ N(mu1, 1), X2 ~ N(mu2, 1),
    X3 ~ Bernoulli(p); controls X1 ~ N(0, 1), X2 ~ N(2, 1),
    X3 ~ Bernoulli(.4). Normal outcomes with unit noise.
``nethery-c``
    Half treated. Treated X1 ~ Bernoulli(.5), X2 ~ N(2 + c, (1.25 + .1c)^2);
    controls X1 ~ Bernoulli(.4), X2 ~ N(1, 1). Noise-free potential
    outcomes, so the true ATE differs between replications.
``binary-Y1B``, ``binary-Y2B``
    Covariates as in the continuous families, probit outcomes.

Each generator returns a :class:`SimulatedData` whose ``dataset`` already
has standardized covariates; the raw draws are kept in ``raw_X``.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from .estimands import summarize_ate
from .io import SpecError, standardize_covariates
from .mcmc import McmcConfig, PosteriorDraws, run_chains
from .model import Dataset, HyperPriorConfig
from .parallel import pmap
from .rand import rng_stream

log = logging.getLogger(__name__)

FAMILIES = ("linear-Y1", "nonlinear-Y2", "nethery-c", "binary-Y1B", "binary-Y2B")
BINARY_FAMILIES = ("binary-Y1B", "binary-Y2B")
NETHERY_C_VALUES = (0.0, 0.35, 0.7)
MAX_FAILURE_RATE = 0.02
ORACLE_SEED = 20240601
ORACLE_DRAWS = 10**6


@dataclass(frozen=True)
class OverlapParams:
    """Treated-arm covariate law: X1 ~ N(mu1, 1), X2 ~ N(mu2, 1), X3 ~ Bernoulli(p)."""

    mu1: float = 1.0
    mu2: float = 2.0
    p: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.mu1) and np.isfinite(self.mu2)):
            raise ValueError("overlap means must be finite")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")


SOME_NONOVERLAP = OverlapParams(1.0, 2.0, 0.5)
SUBSTANTIAL_NONOVERLAP = OverlapParams(1.0, 3.0, 0.6)
SETTINGS = {"some": SOME_NONOVERLAP, "substantial": SUBSTANTIAL_NONOVERLAP}

# Population risk differences E[Phi(f(X, 1)) - Phi(f(X, 0))], from
# true_risk_difference(family, params) with ORACLE_DRAWS draws at ORACLE_SEED.
TRUE_RISK_DIFFERENCE = {
    ("binary-Y1B", SOME_NONOVERLAP): 0.279350364920593,
    ("binary-Y1B", SUBSTANTIAL_NONOVERLAP): 0.28273682071490186,
    ("binary-Y2B", SOME_NONOVERLAP): -0.1457667985380658,
    ("binary-Y2B", SUBSTANTIAL_NONOVERLAP): -0.20283950044434898,
}


@dataclass(frozen=True)
class SimulatedData:
    dataset: Dataset
    truth: float
    raw_X: np.ndarray
    ps: np.ndarray | None = None
    effects: np.ndarray | None = None


# --------------------------------------------------------------------------
# generators


def _both_arms(draw_a, n, rng):
    # degenerate draws are astronomically rare at realistic n but would
    # violate the Dataset invariant, so redraw
    for _ in range(1000):
        a = draw_a(n, rng)
        if 0 < a.sum() < n:
            return a
    raise RuntimeError("could not draw a treatment vector with both arms present")


def gen_covariates(params: OverlapParams, n: int, rng: np.random.Generator):
    """Treatment and raw covariates (X1, X2, X3) for the Y1/Y2 families."""
    a = _both_arms(lambda m, r: r.binomial(1, 0.5, m).astype(float), n, rng)
    x1 = rng.normal(params.mu1 * a, 1.0)
    x2 = rng.normal(params.mu2 * a + 2.0 * (1 - a), 1.0)
    x3 = rng.binomial(1, params.p * a + 0.4 * (1 - a)).astype(float)
    return a, np.column_stack([x1, x2, x3])


def _dataset(y, a, X, kind="continuous"):
    Z, _ = standardize_covariates(X, ("x1", "x2", "x3")[: X.shape[1]])
    return Dataset(y, a, Z, kind)


def linear_mean(X, a):
    return 1.0 - 2.0 * X[:, 0] + X[:, 1] - 1.2 * X[:, 2] + 2.0 * a


def nonlinear_mean(X, a, a_coef=2.0):
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    return (
        -3.0 - 2.5 * x1 + 2.0 * x1**2 * a + np.exp(1.4 - x2 * a)
        + x2 * x3 - 1.2 * x3 - 2.0 * x3 * a + a_coef * a
    )


def nonlinear_effect(X) -> np.ndarray:
    """Individual effect ``E[Y | X, A=1] - E[Y | X, A=0]`` of the Y2 surface."""
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    return 2.0 * x1**2 + np.exp(1.4 - x2) - math.exp(1.4) - 2.0 * x3 + 2.0


def gen_linear(params: OverlapParams, n: int, rng: np.random.Generator) -> SimulatedData:
    a, X = gen_covariates(params, n, rng)
    y = rng.normal(linear_mean(X, a), 1.0)
    return SimulatedData(_dataset(y, a, X), 2.0, X, effects=np.full(n, 2.0))


def gen_nonlinear(params: OverlapParams, n: int, rng: np.random.Generator) -> SimulatedData:
    """Y2 surface; the truth is the sample mean of the individual effects."""
    a, X = gen_covariates(params, n, rng)
    y = rng.normal(nonlinear_mean(X, a), 1.0)
    eff = nonlinear_effect(X)
    return SimulatedData(_dataset(y, a, X), float(eff.mean()), X, effects=eff)


def nethery_potentials(X) -> tuple[np.ndarray, np.ndarray]:
    x1, x2 = X[:, 0], X[:, 1]
    y0 = -1.5 * x2
    y1 = -3.0 / (1.0 + np.exp(-10.0 * (x2 - 1.0))) + 0.25 * x1 - x1 * x2
    return y0, y1


def nethery_true_ps(X, c: float) -> np.ndarray:
    """P(A=1 | X) from the two arm-specific covariate densities (equal arm sizes)."""
    x1, x2 = X[:, 0], X[:, 1]
    f1 = norm.pdf(x2, 2.0 + c, 1.25 + 0.1 * c) * 0.5
    f0 = norm.pdf(x2, 1.0, 1.0) * np.where(x1 == 1, 0.4, 0.6)
    return f1 / (f1 + f0)


def gen_nethery(c: float, n: int, rng: np.random.Generator) -> SimulatedData:
    if not (np.isfinite(c) and c >= 0):
        raise ValueError(f"c must be a nonnegative number, got {c}")
    if n < 2:
        raise ValueError("need at least two subjects")
    a = np.zeros(n)
    a[rng.permutation(n)[: n // 2]] = 1.0
    x1 = rng.binomial(1, np.where(a == 1, 0.5, 0.4)).astype(float)
    x2 = np.where(a == 1, rng.normal(2.0 + c, 1.25 + 0.1 * c, n), rng.normal(1.0, 1.0, n))
    X = np.column_stack([x1, x2])
    y0, y1 = nethery_potentials(X)
    y = a * y1 + (1 - a) * y0
    eff = y1 - y0
    return SimulatedData(_dataset(y, a, X), float(eff.mean()), X, ps=nethery_true_ps(X, c), effects=eff)


def probit_index(family: str, X, a) -> np.ndarray:
    if family == "binary-Y1B":
        return -1.0 - 2.0 * X[:, 0] + X[:, 1] - 1.2 * X[:, 2] + 2.0 * a
    if family == "binary-Y2B":
        # the binary version carries an A coefficient of 1, not 2
        return nonlinear_mean(X, a, a_coef=1.0)
    raise ValueError(f"not a binary family: {family!r}")


@lru_cache(maxsize=32)
def true_risk_difference(family: str, params: OverlapParams, n_draws: int = ORACLE_DRAWS,
                         seed: int = ORACLE_SEED) -> float:
    """Monte Carlo ``E[Phi(f(X, 1)) - Phi(f(X, 0))]`` over the scenario's covariate law."""
    rng = rng_stream(seed, FAMILIES.index(family))
    total, done, chunk = 0.0, 0, 250_000
    while done < n_draws:
        m = min(chunk, n_draws - done)
        _, X = gen_covariates(params, m, rng)
        total += float(np.sum(ndtr(probit_index(family, X, np.ones(m))) - ndtr(probit_index(family, X, np.zeros(m)))))
        done += m
    return total / n_draws


def gen_binary(family: str, params: OverlapParams, n: int, rng: np.random.Generator) -> SimulatedData:
    if family not in BINARY_FAMILIES:
        raise ValueError(f"not a binary family: {family!r}")
    a, X = gen_covariates(params, n, rng)
    y = (rng.uniform(size=n) < ndtr(probit_index(family, X, a))).astype(float)
    truth = TRUE_RISK_DIFFERENCE.get((family, params))
    if truth is None:
        truth = true_risk_difference(family, params)
    return SimulatedData(_dataset(y, a, X, "binary"), truth, X)


# --------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class Estimate:
    estimate: float
    sd: float
    ci_low: float
    ci_high: float

    def covers(self, value) -> bool:
        return self.ci_low <= value <= self.ci_high


def ols_ate(data: Dataset, level: float = 0.95) -> Estimate:
    """Coefficient of treatment in ``y ~ 1 + a + X`` with its t-interval."""
    import statsmodels.api as sm

    exog = np.column_stack([np.ones(data.n), data.a, data.X])
    fit = sm.OLS(np.asarray(data.y), exog).fit()
    lo, hi = fit.conf_int(alpha=1 - level)[1]
    return Estimate(float(fit.params[1]), float(fit.bse[1]), float(lo), float(hi))


def probit_rd(data: Dataset, level: float = 0.95) -> Estimate:
    """Average discrete change in ``P(y=1)`` from a=0 to a=1 under a probit GLM, delta-method SE."""
    import statsmodels.api as sm

    exog = np.column_stack([np.ones(data.n), data.a, data.X])
    with warnings.catch_warnings():
        warnings.simplefilter("error", category=RuntimeWarning)
        fit = sm.Probit(np.asarray(data.y), exog).fit(disp=0, maxiter=200)
    if not fit.mle_retvals.get("converged", True):
        raise RuntimeError("probit fit did not converge")
    me = fit.get_margeff(at="overall", method="dydx", dummy=True)
    lo, hi = me.conf_int(alpha=1 - level)[0]
    return Estimate(float(me.margeff[0]), float(me.margeff_se[0]), float(lo), float(hi))


# --------------------------------------------------------------------------
# scenario specs and the replication loop


@dataclass(frozen=True)
class ScenarioSpec:
    family: str
    n: int = 200
    n_replications: int = 100
    overlap: OverlapParams = SOME_NONOVERLAP
    c: float = 0.0
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(n_burnin=2000, n_kept_iterations=1000, thin=5))
    hyper: HyperPriorConfig = field(default_factory=HyperPriorConfig)
    seed: int = 0
    baseline: bool = True
    level: float = 0.95

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}; legal families: {', '.join(FAMILIES)}")
        if self.n < 10:
            raise SpecError("n must be at least 10")
        if self.n_replications < 1:
            raise SpecError("the replication count K must be positive")
        if not (np.isfinite(self.c) and self.c >= 0):
            raise SpecError(f"c must be a nonnegative number, got {self.c}")
        if self.mcmc.seed != self.seed:
            object.__setattr__(self, "mcmc", replace(self.mcmc, seed=self.seed))

    @property
    def binary(self) -> bool:
        return self.family in BINARY_FAMILIES

    @property
    def baseline_name(self) -> str:
        return "Probit model" if self.binary else "Linear model"

    def generate(self, rng: np.random.Generator) -> SimulatedData:
        if self.family == "linear-Y1":
            return gen_linear(self.overlap, self.n, rng)
        if self.family == "nonlinear-Y2":
            return gen_nonlinear(self.overlap, self.n, rng)
        if self.family == "nethery-c":
            return gen_nethery(self.c, self.n, rng)
        return gen_binary(self.family, self.overlap, self.n, rng)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "n": self.n,
            "K": self.n_replications,
            "mu1": self.overlap.mu1,
            "mu2": self.overlap.mu2,
            "p": self.overlap.p,
            "c": self.c,
            "seed": self.seed,
            "baseline": self.baseline,
            "level": self.level,
            "mcmc": self.mcmc.to_dict(),
            "hyper": self.hyper.to_dict(),
        }


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def scenario_from_kv(kv: dict) -> ScenarioSpec:
    """Build a spec from ``key = value`` pairs.

    Keys: ``family`` (required), ``n``, ``K``, ``setting`` (``some`` or
    ``substantial``) or ``mu1``/``mu2``/``p``, ``c``, ``burnin``, ``kept``,
    ``thin``, ``chains``, ``adapt``, ``conjugate_sigma2``,
    ``collapse_delta``, ``seed``, ``baseline``, ``level``,
    ``sigma2_beta`` and ``prior_<name> = shape, rate``.
    """
    kv = dict(kv)
    family = kv.pop("family", None)
    if family is None:
        raise SpecError("spec is missing the 'family' key")
    if family not in FAMILIES:
        raise SpecError(f"unknown family {family!r}; legal families: {', '.join(FAMILIES)}")

    def num(key, default, cast=float):
        raw = kv.pop(key, None)
        if raw is None:
            return default
        try:
            return cast(raw)
        except ValueError:
            raise SpecError(f"{key} must be {'an integer' if cast is int else 'a number'}, got {raw!r}") from None

    def flag(key, default):
        raw = kv.pop(key, None)
        if raw is None:
            return default
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise SpecError(f"{key} must be true/false, got {raw!r}")

    setting = kv.pop("setting", None)
    if setting is not None and setting not in SETTINGS:
        raise SpecError(f"unknown setting {setting!r}; use one of {', '.join(SETTINGS)}")
    base = SETTINGS.get(setting, SOME_NONOVERLAP)
    try:
        overlap = OverlapParams(num("mu1", base.mu1), num("mu2", base.mu2), num("p", base.p))
        mcmc = McmcConfig(
            n_burnin=num("burnin", 2000, int),
            n_kept_iterations=num("kept", 1000, int),
            thin=num("thin", 5, int),
            n_chains=num("chains", 1, int),
            adapt=flag("adapt", True),
            conjugate_sigma2=flag("conjugate_sigma2", False),
            collapse_delta=flag("collapse_delta", False),
        )
        hyper_kw = {}
        if "sigma2_beta" in kv:
            hyper_kw["sigma2_beta"] = num("sigma2_beta", None)
        for key in [k for k in kv if k.startswith("prior_")]:
            name = key[len("prior_"):]
            parts = kv.pop(key).split(",")
            if len(parts) != 2:
                raise SpecError(f"{key} needs 'shape, rate' (or 'shape, scale' for sigma2)")
            hyper_kw[name] = tuple(float(p) for p in parts)
        hyper = HyperPriorConfig(**hyper_kw)
    except TypeError as exc:
        raise SpecError(f"bad prior override: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(str(exc)) from None
    spec = ScenarioSpec(
        family=family,
        n=num("n", 200, int),
        n_replications=num("K", 100, int),
        overlap=overlap,
        c=num("c", 0.0),
        mcmc=mcmc,
        hyper=hyper,
        seed=num("seed", 0, int),
        baseline=flag("baseline", True),
        level=num("level", 0.95),
    )
    if kv:
        raise SpecError(f"unknown spec keys: {', '.join(sorted(kv))}")
    return spec


@dataclass(frozen=True)
class ReplicationRow:
    method: str
    k: int
    truth: float
    estimate: float = float("nan")
    sd: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    failed: bool = False
    error: str = ""

    @property
    def covered(self) -> bool:
        return (not self.failed) and self.ci_low <= self.truth <= self.ci_high


@dataclass(frozen=True)
class MethodMetrics:
    method: str
    ate: float
    abs_bias: float
    pct_bias: float
    sd_bar: float
    se: float
    coverage: float
    n_ok: int
    n_failed: int

    @property
    def valid(self) -> bool:
        return self.n_failed <= MAX_FAILURE_RATE * (self.n_ok + self.n_failed) and self.n_ok > 0


def compute_metrics(method: str, rows) -> MethodMetrics:
    """Aggregate replication rows; failed rows are excluded and counted.

    ATE is the mean estimate, %Bias the mean of ``|est - truth| / |truth|``
    times 100, SDbar the mean posterior SD, SE the SD of the estimates across
    replications, Coverage the share of intervals containing the truth.
    """
    rows = list(rows)
    ok = [r for r in rows if not r.failed]
    n_fail = len(rows) - len(ok)
    if not ok:
        nan = float("nan")
        return MethodMetrics(method, nan, nan, nan, nan, nan, nan, 0, n_fail)
    est = np.array([r.estimate for r in ok])
    truth = np.array([r.truth for r in ok])
    err = np.abs(est - truth)
    with np.errstate(divide="ignore"):
        pct = float(np.mean(err / np.abs(truth)) * 100.0)
    return MethodMetrics(
        method=method,
        ate=float(est.mean()),
        abs_bias=float(err.mean()),
        pct_bias=pct,
        sd_bar=float(np.mean([r.sd for r in ok])),
        se=float(est.std(ddof=1)) if len(ok) > 1 else 0.0,
        coverage=float(np.mean([r.covered for r in ok])),
        n_ok=len(ok),
        n_failed=n_fail,
    )


@dataclass
class ReplicationReport:
    spec: ScenarioSpec
    rows: list
    metrics: dict
    wall_time: float = 0.0

    @property
    def gp(self) -> MethodMetrics:
        return self.metrics["GP"]

    @property
    def baseline(self) -> MethodMetrics | None:
        return self.metrics.get(self.spec.baseline_name)

    @property
    def valid(self) -> bool:
        return all(m.valid for m in self.metrics.values())

    @property
    def uses_abs_bias(self) -> bool:
        return self.spec.family == "nethery-c"

    def table(self) -> tuple[list, list]:
        """Header and rows in the layout Method, ATE (or AbsBias), %Bias, SDbar, SE, Coverage."""
        first = "AbsBias" if self.uses_abs_bias else "ATE"
        header = ["Method", first, "%Bias", "SDbar", "SE", "Coverage", "Failed"]
        body = []
        for m in self.metrics.values():
            lead = m.abs_bias if self.uses_abs_bias else m.ate
            body.append([m.method, lead, m.pct_bias, m.sd_bar, m.se, m.coverage, m.n_failed])
        return header, body


def fit_gp(data: Dataset, spec: ScenarioSpec, k: int) -> PosteriorDraws:
    chains = run_chains(data, spec.hyper, spec.mcmc, stream=(k, 1), workers=1)
    return PosteriorDraws.pool([c.draws for c in chains])


def run_one(spec: ScenarioSpec, k: int) -> list[ReplicationRow]:
    """Replication ``k``: data on stream ``(seed, k, 0)``, chains on ``(seed, k, 1, chain)``."""
    sim = spec.generate(rng_stream(spec.seed, k, 0))
    rows = []
    try:
        s = summarize_ate(fit_gp(sim.dataset, spec, k), level=spec.level)
        rows.append(ReplicationRow("GP", k, sim.truth, s.estimate, s.sd, s.ci_low, s.ci_high))
    except Exception as exc:  # noqa: BLE001 - a failed replication is recorded, not fatal
        log.warning("replication %d: GP fit failed: %s", k, exc)
        rows.append(ReplicationRow("GP", k, sim.truth, failed=True, error=f"{type(exc).__name__}: {exc}"))
    if spec.baseline:
        try:
            e = probit_rd(sim.dataset, spec.level) if spec.binary else ols_ate(sim.dataset, spec.level)
            rows.append(ReplicationRow(spec.baseline_name, k, sim.truth, e.estimate, e.sd, e.ci_low, e.ci_high))
        except Exception as exc:  # noqa: BLE001
            log.warning("replication %d: baseline failed: %s", k, exc)
            rows.append(ReplicationRow(spec.baseline_name, k, sim.truth, failed=True, error=f"{type(exc).__name__}: {exc}"))
    return rows


def _job(args):
    spec, k = args
    return run_one(spec, k)


def run_replications(spec: ScenarioSpec, workers=None, progress=None) -> ReplicationReport:
    """Run all replications (in parallel when workers > 1) and aggregate per method."""
    t0 = time.perf_counter()
    ks = range(1, spec.n_replications + 1)
    if progress is None:
        results = pmap(_job, [(spec, k) for k in ks], workers)
    else:
        results = []
        for k in ks:
            results.append(run_one(spec, k))
            progress(k, results[-1])
    rows = [r for chunk in results for r in chunk]
    methods = ["GP"] + ([spec.baseline_name] if spec.baseline else [])
    metrics = {m: compute_metrics(m, [r for r in rows if r.method == m]) for m in methods}
    report = ReplicationReport(spec, rows, metrics, time.perf_counter() - t0)
    for m in metrics.values():
        if m.n_failed:
            log.warning("%s: %d of %d replications failed", m.method, m.n_failed, m.n_failed + m.n_ok)
    return report
