"""Three-layer hierarchical posterior: composite Gaussian-copula data layer,
composite latent-GP layers for each GEV parameter's residual field, and
weakly informative priors.

Stations are split into fixed random groups once per run; the same grouping
machinery serves both the copula likelihood (complete stations only) and the
three latent-GP likelihoods (all stations). Incomplete stations contribute
marginal GEV terms over their available years but no copula term; their
residuals still participate in the GP layer, so they inform the spatial
surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import gev
from .copula import copula_loglik_grouped
from .spatial import (
    CovParams,
    RegressionField,
    chol_with_jitter,
    exp_cov_matrix,
    surface_values,
)

GAMMA_NAMES = ("mu", "sigma", "xi")

_LOG_2PI = float(np.log(2.0 * np.pi))

# prior standard deviations (normal centered at zero; positive parameters get
# the half-normal with the same sd)
PRIOR_SD_XI_VARIANCE = 0.1     # psill and nugget of the shape residual field
PRIOR_SD_VARIANCE = 1.0        # psill/nugget of location and scale fields
PRIOR_SD_WEIGHTS = 1.0         # all basis weights
PRIOR_SD_XI_INTERCEPT = 1.0
PRIOR_SD_INTERCEPT = 10.0      # location and scale intercepts
PRIOR_SD_RANGE = 1000.0        # every range-type parameter, km


@dataclass(frozen=True)
class GroupPartition:
    """Fixed assignment of stations to composite-likelihood groups."""

    group_of_station: np.ndarray  # (m,) int
    n_groups: int
    target_size: int

    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.group_of_station == g) for g in range(self.n_groups)]

    @property
    def n_stations(self) -> int:
        return self.group_of_station.size


def make_partition(m: int, n_g: int, seed) -> GroupPartition:
    """Random balanced partition of m stations into groups of ~n_g.

    G = ceil(m / n_g); group sizes differ by at most one. Deterministic given
    the seed.
    """
    if not 1 <= n_g <= m:
        raise ValueError(f"group size must be in [1, {m}], got {n_g}")
    n_groups = int(np.ceil(m / n_g))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(m)
    base = m // n_groups
    rem = m % n_groups
    assign = np.empty(m, dtype=int)
    start = 0
    for g in range(n_groups):
        size = base + (1 if g < rem else 0)
        assign[perm[start : start + size]] = g
        start += size
    return GroupPartition(group_of_station=assign, n_groups=n_groups, target_size=n_g)


@dataclass
class ModelState:
    """Every sampled quantity of the hierarchy."""

    field_mu: RegressionField
    field_sigma: RegressionField
    field_xi: RegressionField
    w_mu: np.ndarray
    w_sigma: np.ndarray
    w_xi: np.ndarray
    theta_mu: CovParams
    theta_sigma: CovParams
    theta_xi: CovParams
    a0: float

    def fields(self) -> tuple[RegressionField, RegressionField, RegressionField]:
        return (self.field_mu, self.field_sigma, self.field_xi)

    def residuals(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.w_mu, self.w_sigma, self.w_xi)

    def thetas(self) -> tuple[CovParams, CovParams, CovParams]:
        return (self.theta_mu, self.theta_sigma, self.theta_xi)


@dataclass
class ObservationSet:
    """Seasonal maxima and covariates for a screened station network.

    ``maxima`` is (n_years, m) with NaN marking missing years;
    ``complete_mask`` is True where a station has no missing years.
    Covariates may be z-scored; the transform is kept so grid covariates can
    be mapped identically later.
    """

    station_ids: list[str]
    sites: np.ndarray        # (m, 2) lon/lat
    covariates: np.ndarray   # (m, p)
    maxima: np.ndarray       # (n_years, m), NaN = missing
    years: np.ndarray        # (n_years,)
    complete_mask: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    covariate_mean: np.ndarray | None = None
    covariate_sd: np.ndarray | None = None

    @property
    def n_stations(self) -> int:
        return self.sites.shape[0]

    @property
    def n_years(self) -> int:
        return self.maxima.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def complete_indices(self) -> np.ndarray:
        return np.flatnonzero(self.complete_mask)


def mvn_logpdf_zero_mean(w: np.ndarray, cov: np.ndarray) -> float:
    """Zero-mean multivariate normal log density via Cholesky (with the
    shared jitter ladder)."""
    low, _ = chol_with_jitter(cov)
    z = solve_triangular(low, w, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
    return -0.5 * (w.size * _LOG_2PI + logdet + float(z @ z))


def latent_gp_loglik_grouped(
    w, theta: CovParams, sites, partition: GroupPartition
) -> float:
    """Composite log likelihood of one residual field: sum over groups of the
    zero-mean MVN log density under the group's exponential covariance."""
    w = np.asarray(w, dtype=float)
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    total = 0.0
    for idx in partition.groups():
        total += mvn_logpdf_zero_mean(w[idx], exp_cov_matrix(sites[idx], theta))
    return total


def _normal_lpdf(x, sd) -> float:
    return float(np.sum(-0.5 * (np.asarray(x, float) / sd) ** 2 - np.log(sd) - 0.5 * _LOG_2PI))


def _half_normal_lpdf(x, sd) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        return -np.inf
    return float(np.log(2.0) * x.size) + _normal_lpdf(x, sd)


def log_prior(state: ModelState) -> float:
    """Weakly informative priors: normals centered at zero (half-normals on
    the positive half-line for variances and ranges); -inf on support
    violations."""
    for th in state.thetas():
        if th.psill < 0 or th.nugget < 0 or th.range_km <= 0:
            return -np.inf
    if state.a0 <= 0:
        return -np.inf
    for f in state.fields():
        if np.any(f.kernel_ranges <= 0):
            return -np.inf

    lp = 0.0
    lp += _normal_lpdf(state.field_mu.intercept, PRIOR_SD_INTERCEPT)
    lp += _normal_lpdf(state.field_sigma.intercept, PRIOR_SD_INTERCEPT)
    lp += _normal_lpdf(state.field_xi.intercept, PRIOR_SD_XI_INTERCEPT)
    for f in state.fields():
        lp += _normal_lpdf(f.weights, PRIOR_SD_WEIGHTS)
        lp += _half_normal_lpdf(f.kernel_ranges, PRIOR_SD_RANGE)
    for name, th in zip(GAMMA_NAMES, state.thetas()):
        sd_var = PRIOR_SD_XI_VARIANCE if name == "xi" else PRIOR_SD_VARIANCE
        lp += _half_normal_lpdf(th.psill, sd_var)
        lp += _half_normal_lpdf(th.nugget, sd_var)
        lp += _half_normal_lpdf(th.range_km, PRIOR_SD_RANGE)
    lp += _half_normal_lpdf(state.a0, PRIOR_SD_RANGE)
    return lp


def gev_surfaces(state: ModelState, obs: ObservationSet):
    """(mu, sigma, xi) parameter vectors at the observation stations."""
    return surface_values(
        state.fields(), obs.sites, obs.covariates, state.w_mu, state.w_sigma, state.w_xi
    )


def data_loglik(
    state: ModelState, obs: ObservationSet, complete_partition: GroupPartition
) -> float:
    """Data-layer log likelihood: composite copula over complete stations
    plus marginal GEV terms over the available years of incomplete stations.
    """
    mu, sigma, xi = gev_surfaces(state, obs)
    comp = obs.complete_indices()

    total = 0.0
    incomplete = np.flatnonzero(~obs.complete_mask)
    if incomplete.size:
        y = obs.maxima[:, incomplete]
        ll = gev.logpdf_values(y, mu[incomplete], sigma[incomplete], xi[incomplete])
        ll = np.where(np.isnan(y), 0.0, ll)
        total += float(np.sum(ll))
        if not np.isfinite(total):
            return -np.inf

    if comp.size:
        params = [gev.GevParams(mu[i], sigma[i], xi[i]) for i in comp]
        total += copula_loglik_grouped(
            obs.maxima[:, comp], params, obs.sites[comp], complete_partition, state.a0
        )
    return total


def log_posterior(
    state: ModelState,
    obs: ObservationSet,
    partition_all: GroupPartition,
    partition_complete: GroupPartition,
) -> float:
    """Full composite log posterior (prior + three GP layers + data layer).

    ``partition_all`` groups every station (GP layers); ``partition_complete``
    groups the complete stations only, indexed within the complete subset
    (copula layer). Reference implementation: the sampler uses an
    algebraically identical cached evaluator in :mod:`spatgev.target`.
    """
    lp = log_prior(state)
    if not np.isfinite(lp):
        return -np.inf
    for w, th in zip(state.residuals(), state.thetas()):
        lp += latent_gp_loglik_grouped(w, th, obs.sites, partition_all)
    val = data_loglik(state, obs, partition_complete)
    if not np.isfinite(val):
        return -np.inf
    return lp + val
