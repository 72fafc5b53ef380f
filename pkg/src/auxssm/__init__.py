"""Auxiliary Kalman samplers and auxiliary particle Gibbs for state-space smoothing."""

__version__ = "0.1.0"

from .gauss import FactorizationError, GaussParams, RngStream, condition, logpdf, sample
from .lgssm import (
    LGSSM, FilterResult, backward_sample, dense_oracle, kalman_filter, random_model, rts_smoother,
)
from .pit import associative_scan, dnc_sample, extract_affine_law, parallel_filter, prefix_sample
from .auxk import GenSSMTarget, LinearObs, adapt_delta, gradient_error, init_state, kernel_step
from .fkpg import (
    AuxiliaryFK, BootstrapFK, FeynmanKacModel, PseudoMarginalFK, aux_pgibbs_step, csmc_step, smc,
)

__all__ = [
    "__version__", "FactorizationError", "GaussParams", "RngStream", "condition", "logpdf", "sample",
    "LGSSM", "FilterResult", "backward_sample", "dense_oracle", "kalman_filter", "random_model",
    "rts_smoother", "associative_scan", "dnc_sample", "extract_affine_law", "parallel_filter",
    "prefix_sample", "GenSSMTarget", "LinearObs", "adapt_delta", "gradient_error", "init_state",
    "kernel_step", "AuxiliaryFK", "BootstrapFK", "FeynmanKacModel", "PseudoMarginalFK",
    "aux_pgibbs_step", "csmc_step", "smc",
]
