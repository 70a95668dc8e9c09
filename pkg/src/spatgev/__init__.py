"""Hierarchical Bayesian spatial modeling of precipitation extremes.

GEV marginals coupled by a Gaussian elliptical copula, latent Gaussian-
process regressions with spatially varying radial-basis coefficients,
composite likelihood over random station groups, adaptive block-Metropolis
inference, and gridded return-level maps with uncertainty.
"""

from .gev import GevParams, gev_cdf, gev_logpdf, gev_mle_fit, gev_quantile, return_level
from .spatial import (
    CovParams,
    RegressionField,
    conditional_simulate,
    dependogram_matrix,
    distance,
    eval_coefficients,
    eval_gev_surface,
    exp_cov_matrix,
    krige_conditional,
    rbf_basis,
    space_filling_knots,
)
from .copula import asymptotic_independence_test, copula_loglik, copula_loglik_grouped
from .model import (
    GroupPartition,
    ModelState,
    ObservationSet,
    latent_gp_loglik_grouped,
    log_posterior,
    log_prior,
    make_partition,
)
from .sampler import ChainConfig, effective_sample_size, rhat, run_chains
from .archive import PosteriorArchive

__version__ = "0.1.0"
