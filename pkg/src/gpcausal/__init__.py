"""Average treatment effects under limited overlap with Gaussian-process priors.

The outcome is modelled as ``y = mu(X) + Delta(X) * a + eps`` with GP priors
on the prognostic surface ``mu`` and the effect surface ``Delta``; the
posterior is explored with a Metropolis-within-Gibbs sampler. Binary
outcomes use probit data augmentation.
"""

from .estimands import PosteriorSummary, SubjectEffectSummary, summarize_ate, summarize_subjects
from .kernels import KernelParams, NotPositiveDefiniteError, PDMatrix, chol_factor, pd_logdet, pd_solve, se_kernel
from .mcmc import ChainResult, McmcConfig, McmcError, PosteriorDraws, geweke_joint_test, run_chain, run_chains
from .model import (
    ConditionalMVN,
    Dataset,
    HyperPriorConfig,
    ParamState,
    cond_beta,
    cond_delta,
    cond_mu,
    log_joint,
)
from .probit import RiskDifferenceDraw, risk_difference_draw, run_chain_binary, sample_latent_z

__version__ = "0.1.0"

__all__ = [
    "ChainResult",
    "ConditionalMVN",
    "Dataset",
    "HyperPriorConfig",
    "KernelParams",
    "McmcConfig",
    "McmcError",
    "NotPositiveDefiniteError",
    "PDMatrix",
    "ParamState",
    "PosteriorDraws",
    "PosteriorSummary",
    "RiskDifferenceDraw",
    "SubjectEffectSummary",
    "chol_factor",
    "cond_beta",
    "cond_delta",
    "cond_mu",
    "geweke_joint_test",
    "log_joint",
    "pd_logdet",
    "pd_solve",
    "risk_difference_draw",
    "run_chain",
    "run_chain_binary",
    "run_chains",
    "sample_latent_z",
    "se_kernel",
    "summarize_ate",
    "summarize_subjects",
    "__version__",
]
