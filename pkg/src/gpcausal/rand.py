"""Seeded random streams, samplers and log densities used by the sampler.

Streams are built on Philox (a counter-based generator) keyed through
``SeedSequence(seed, spawn_key=stream_ids)``, so any number of chains and
replications can draw independently without coordinating.

Conventions: gamma densities are shape-rate, inverse-gamma densities are
shape-scale.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtri_exp

from .kernels import PDMatrix, pd_half_solve, pd_logdet

_LOG_2PI = math.log(2.0 * math.pi)


def rng_stream(seed: int, *stream) -> np.random.Generator:
    """Generator for ``(seed, stream...)``; equal keys give bit-identical sequences."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def sample_mvn(mean, cov_factor: PDMatrix, rng: np.random.Generator) -> np.ndarray:
    """``mean + S z`` with ``z`` standard normal and ``S`` the covariance square root.

    ``cov_factor`` is a :class:`PDMatrix` or anything else exposing ``n`` and
    ``apply(z)`` (e.g. :class:`~gpcausal.kernels.SqrtCovariance`).
    """
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (cov_factor.n,):
        raise ValueError(f"mean has shape {mean.shape}, covariance is {cov_factor.n}x{cov_factor.n}")
    return mean + cov_factor.apply(rng.standard_normal(cov_factor.n))


def _log_diff_exp(la, lb):
    # log(exp(lb) - exp(la)) for la <= lb
    with np.errstate(divide="ignore", invalid="ignore"):
        return lb + np.log1p(-np.exp(la - lb))


def sample_truncnorm(mean, sd, lower=-np.inf, upper=np.inf, rng=None, size=None):
    """Inverse-CDF draw from a normal truncated to ``(lower, upper)``.

    All arguments broadcast. The interval is reflected so that it always lies
    in the lower half of the standard normal where ``log_ndtr`` keeps full
    relative precision; the uniform is then mapped through
    ``log Phi(a) + u * (Phi(b) - Phi(a))`` evaluated in log space. This stays
    finite for intervals forty or more standard deviations into the tail.
    """
    if rng is None:
        raise ValueError("an explicit rng is required")
    if size is None and all(isinstance(v, (float, int)) for v in (mean, sd, lower, upper)):
        return _truncnorm_scalar(float(mean), float(sd), float(lower), float(upper), rng)
    mean, sd, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mean, sd, lower, upper))
    )
    if size is not None:
        mean, sd, lower, upper = (np.broadcast_to(v, size) for v in (mean, sd, lower, upper))
    if np.any(~(lower < upper)):
        raise ValueError("truncation bounds must satisfy lower < upper")
    if np.any(~(sd > 0)):
        raise ValueError("sd must be positive")
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    # reflect intervals sitting in the upper tail
    flip = a > -b
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    la = log_ndtr(lo)
    lb = log_ndtr(hi)
    u = rng.uniform(size=mean.shape)
    # log(Phi(lo) + u (Phi(hi) - Phi(lo)))
    with np.errstate(divide="ignore"):
        log_mass = _log_diff_exp(la, lb)
        logp = np.logaddexp(la, np.log(u) + log_mass)
    x = ndtri_exp(np.minimum(logp, 0.0))
    x = np.clip(x, lo, hi)
    x = np.where(flip, -x, x)
    out = mean + sd * x
    # keep strictly inside the open interval
    out = np.maximum(out, np.nextafter(lower, np.inf))
    out = np.minimum(out, np.nextafter(upper, -np.inf))
    return out if out.ndim else float(out)


def _truncnorm_scalar(mean, sd, lower, upper, rng):
    # same algorithm as the array path without numpy broadcasting overhead;
    # consumes one uniform, like the array path
    if not lower < upper:
        raise ValueError("truncation bounds must satisfy lower < upper")
    if not sd > 0:
        raise ValueError("sd must be positive")
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    flip = a > -b
    lo, hi = (-b, -a) if flip else (a, b)
    la = float(log_ndtr(lo))
    lb = float(log_ndtr(hi))
    u = rng.uniform()
    d = la - lb
    log_mass = lb + math.log1p(-math.exp(d)) if d < 0 else -math.inf
    lu = math.log(u) + log_mass if u > 0 else -math.inf
    logp = float(np.logaddexp(la, lu))
    x = float(ndtri_exp(min(logp, 0.0)))
    x = min(max(x, lo), hi)
    if flip:
        x = -x
    out = mean + sd * x
    out = max(out, math.nextafter(lower, math.inf))
    return min(out, math.nextafter(upper, -math.inf))


def normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI


def truncnorm_logpdf(x, mean, sd, lower=-np.inf, upper=np.inf):
    """Log density of a normal truncated to ``(lower, upper)``, normalised by the interval mass.

    Returns ``-inf`` outside the interval.
    """
    if all(isinstance(v, (float, int)) for v in (x, mean, sd, lower, upper)):
        if not lower < x < upper:
            return -math.inf
        a = (lower - mean) / sd
        b = (upper - mean) / sd
        lo, hi = (-b, -a) if a > -b else (a, b)
        la, lb = float(log_ndtr(lo)), float(log_ndtr(hi))
        log_mass = lb + math.log1p(-math.exp(la - lb))
        z = (x - mean) / sd
        return -0.5 * z * z - math.log(sd) - 0.5 * _LOG_2PI - log_mass
    x = np.asarray(x, dtype=float)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    flip = a > -b
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    log_mass = _log_diff_exp(log_ndtr(lo), log_ndtr(hi))
    inside = (x > lower) & (x < upper)
    out = np.where(inside, normal_logpdf(x, mean, sd) - log_mass, -np.inf)
    return out if out.ndim else float(out)


def gamma_logpdf(x, shape, rate):
    if isinstance(x, (float, int)):
        if not x > 0:
            return -math.inf
        return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(x) - rate * x
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    out = np.where(x > 0, val, -np.inf)
    return out if out.ndim else float(out)


def invgamma_logpdf(x, shape, scale):
    if isinstance(x, (float, int)):
        if not x > 0:
            return -math.inf
        return shape * math.log(scale) - math.lgamma(shape) - (shape + 1.0) * math.log(x) - scale / x
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    out = np.where(x > 0, val, -np.inf)
    return out if out.ndim else float(out)


def mvn_logpdf(x, mean, cov: PDMatrix) -> float:
    """Log density of N(mean, cov) where ``cov`` is already factored."""
    r = np.asarray(x, dtype=float) - mean
    w = pd_half_solve(cov, r)
    return float(-0.5 * (w @ w) - 0.5 * pd_logdet(cov) - 0.5 * cov.n * _LOG_2PI)
