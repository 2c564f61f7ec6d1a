"""Bayesian shape-invariant growth curve models fitted by Gibbs / Metropolis-Hastings MCMC."""

from .config import McmcConfig, ModelConfig, PriorConfig, RunConfig
from .data import LongitudinalDataset, SubjectRecord, apply_time_transform, load_dataset
from .sampler import PosteriorSamples, SitarProblem, merge_chains, run_chain, run_chains
from .spline import KnotSet, SplineBasis, place_knots

__all__ = [
    "KnotSet",
    "LongitudinalDataset",
    "McmcConfig",
    "ModelConfig",
    "PosteriorSamples",
    "PriorConfig",
    "RunConfig",
    "SitarProblem",
    "SplineBasis",
    "SubjectRecord",
    "apply_time_transform",
    "load_dataset",
    "merge_chains",
    "place_knots",
    "run_chain",
    "run_chains",
]

__version__ = "0.1.0"
