"""Dependent mixture regression for censored, floor-discretized responses."""

from .data import CovariateRow, CovariateSchema, Dataset, ResponseRecord, ValidationError
from .links import DegenerateBoundsError, LatentBounds, LinkSpec, link_set
from .mcmc import McmcSettings, gibbs_sweep, run_mcmc
from .model import Hyperparams, MixtureState, build_empirical_prior
from .particles import ParticleSet
from .predict import CondSpec, PredictGrid
from .smc import NumericFailure, StopRule, adaptive_truncation_run
from .util import RngPlan

__all__ = [
    "CondSpec",
    "CovariateRow",
    "CovariateSchema",
    "Dataset",
    "DegenerateBoundsError",
    "Hyperparams",
    "LatentBounds",
    "LinkSpec",
    "McmcSettings",
    "MixtureState",
    "NumericFailure",
    "ParticleSet",
    "PredictGrid",
    "RngPlan",
    "StopRule",
    "ValidationError",
    "adaptive_truncation_run",
    "build_empirical_prior",
    "gibbs_sweep",
    "link_set",
    "run_mcmc",
]

__version__ = "0.1.0"
