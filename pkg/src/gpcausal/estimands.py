"""Posterior summaries of the average and subject-level treatment effects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PosteriorSummary:
    estimate: float
    sd: float
    ci_low: float
    ci_high: float
    median: float
    n_draws: int

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


@dataclass(frozen=True)
class SubjectEffectSummary:
    """Per-subject posterior mean and SD of ``Delta``, in ``index`` order.

    When a key is supplied, rows are sorted stably by it. In binary mode the
    effects are on the latent probit scale (``latent_scale=True``).
    """

    index: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    key: np.ndarray | None = None
    latent_scale: bool = False


def _psi(draws) -> np.ndarray:
    psi = getattr(draws, "psi", draws)
    return np.asarray(psi, dtype=float).ravel()


def summarize_ate(draws, level: float = 0.95) -> PosteriorSummary:
    """Posterior mean, SD and equal-tailed credible interval of the ATE draws.

    ``draws`` is either a :class:`~gpcausal.mcmc.PosteriorDraws` or a plain
    array of per-draw effects. Quantiles use linear interpolation (type 7).
    """
    psi = _psi(draws)
    if psi.size < 2:
        raise ValueError("need at least two posterior draws")
    tail = 0.5 * (1.0 - level)
    lo, med, hi = np.quantile(psi, [tail, 0.5, 1.0 - tail])
    return PosteriorSummary(
        estimate=float(psi.mean()),
        sd=float(psi.std(ddof=1)),
        ci_low=float(lo),
        ci_high=float(hi),
        median=float(med),
        n_draws=int(psi.size),
    )


def summarize_subjects(draws, key=None) -> SubjectEffectSummary:
    delta = np.asarray(getattr(draws, "delta", draws), dtype=float)
    if delta.ndim != 2 or delta.shape[0] == 0:
        raise ValueError("need a (draws, subjects) array with at least one draw")
    mean = delta.mean(axis=0)
    sd = delta.std(axis=0, ddof=1) if delta.shape[0] > 1 else np.zeros(delta.shape[1])
    index = np.arange(delta.shape[1])
    latent = getattr(draws, "mode", "continuous") == "binary"
    if key is None:
        return SubjectEffectSummary(index, mean, sd, None, latent)
    key = np.asarray(key, dtype=float)
    if key.shape != (delta.shape[1],):
        raise ValueError("ordering key must have one entry per subject")
    order = np.argsort(key, kind="stable")
    return SubjectEffectSummary(index[order], mean[order], sd[order], key[order], latent)
