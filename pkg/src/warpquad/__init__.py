"""Bayesian quadrature with warped Gaussian processes and moment matching.

Modules
-------
special      normal and bivariate-normal functions, truncated moments, QMC points
gp           exact GP regression with Matern-3/2 and squared-exponential kernels
transforms   warps and the moment-matched beliefs they induce on f
hyperfit     marginal-likelihood fitting in f-space or g-space
quadrature   integral posteriors (closed form, QMC, Taylor) and evidence summaries
sampling     uncertainty sampling, the active loop and MC/QMC/SMC baselines
bench        synthetic problems, metrics, result files and summaries
"""

from .gp import GpModel, KernelSpec, condition, predict
from .hyperfit import FitConfig, FitResult, fit
from .quadrature import (
    GaussianPrior,
    IntegralPosterior,
    QuadratureProblem,
    UniformPrior,
    bmc_posterior,
    functional_posterior_qmc,
    log_density_of_true_Z,
    log_evidence_estimate,
)
from .sampling import Policy, RunTrace, run_active
from .transforms import MomentBelief, Warp, induced_moments, moment_partials

__version__ = "0.1.0"

__all__ = [
    "GpModel",
    "KernelSpec",
    "condition",
    "predict",
    "FitConfig",
    "FitResult",
    "fit",
    "GaussianPrior",
    "UniformPrior",
    "IntegralPosterior",
    "QuadratureProblem",
    "bmc_posterior",
    "functional_posterior_qmc",
    "log_density_of_true_Z",
    "log_evidence_estimate",
    "Policy",
    "RunTrace",
    "run_active",
    "MomentBelief",
    "Warp",
    "induced_moments",
    "moment_partials",
]
