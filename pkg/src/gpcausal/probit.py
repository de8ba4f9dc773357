"""Probit data augmentation for binary outcomes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .model import Dataset, ParamState
from .rand import sample_truncnorm


@dataclass(frozen=True)
class RiskDifferenceDraw:
    p1: float
    p0: float

    @property
    def rd(self) -> float:
        return self.p1 - self.p0


def sample_latent_z(state: ParamState, data: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Draw each ``z_i`` from N(mu_i + Delta_i a_i, 1) truncated to the side of zero given by ``y_i``."""
    m = state.mu + state.delta * data.a
    yes = data.y == 1
    lower = np.where(yes, 0.0, -np.inf)
    upper = np.where(yes, np.inf, 0.0)
    return sample_truncnorm(m, 1.0, lower, upper, rng=rng)


def risk_difference_draw(state: ParamState, data: Dataset | None = None) -> RiskDifferenceDraw:
    # every subject is evaluated under both treatment levels
    p1 = float(np.mean(ndtr(state.mu + state.delta)))
    p0 = float(np.mean(ndtr(state.mu)))
    return RiskDifferenceDraw(p1, p0)


def run_chain_binary(data: Dataset, hp, config, rng, **kwargs):
    """:func:`gpcausal.mcmc.run_chain` in binary mode."""
    from .mcmc import run_chain

    return run_chain(data, hp, config, rng, mode="binary", **kwargs)
