"""Spatial primitives: great-circle distances, exponential covariance with
nugget, the copula dependogram, radial-basis coefficient fields, maximin knot
design and Gaussian-process conditional simulation.

Site collections are ``(n, 2)`` float arrays with columns ``(lon, lat)`` in
degrees; single sites may be any length-2 sequence. All distances are
great-circle kilometers (the study domains span tens of degrees of latitude,
where degree-space distances are badly anisotropic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .gev import GevParams

EARTH_RADIUS_KM = 6371.0

# jitter ladder for barely-non-PD matrices: start at 1e-10 * max diagonal,
# double up to 3 times, then give up
_JITTER_REL = 1e-10
_JITTER_DOUBLINGS = 3


@dataclass(frozen=True)
class CovParams:
    """Exponential-covariance parameters: partial sill (variance of the
    smooth component), range in km, and nugget (micro-scale variance).

    Validity (psill >= 0, nugget >= 0, range_km > 0) is checked at the point
    of use: covariance builders raise, the prior returns -inf.
    """

    psill: float
    range_km: float
    nugget: float

    def is_valid(self) -> bool:
        return self.psill >= 0 and self.nugget >= 0 and self.range_km > 0


@dataclass
class RegressionField:
    """Spatially varying regression coefficients for one GEV parameter.

    Each of the ``p`` coefficients is a weighted sum of ``k`` Gaussian
    kernels centered at the knots; ``weights[i, j]`` is knot i's weight for
    covariate j. The intercept is spatially constant and added separately in
    :func:`eval_gev_surface`.
    """

    intercept: float
    knots: np.ndarray          # (k, 2) lon/lat
    kernel_ranges: np.ndarray  # (k,) km
    weights: np.ndarray        # (k, p)

    def __post_init__(self):
        self.knots = np.atleast_2d(np.asarray(self.knots, dtype=float))
        self.kernel_ranges = np.asarray(self.kernel_ranges, dtype=float)
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        k = self.knots.shape[0]
        if k < 1:
            raise ValueError("need at least one knot")
        if self.kernel_ranges.shape != (k,):
            raise ValueError("kernel_ranges length must match knot count")
        if np.any(self.kernel_ranges <= 0):
            raise ValueError("kernel ranges must be positive")
        if self.weights.shape[0] != k:
            raise ValueError("weights must have one row per knot")

    @property
    def n_knots(self) -> int:
        return self.knots.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.weights.shape[1]


def distance(s1, s2) -> float | np.ndarray:
    """Haversine great-circle distance in km; broadcasts over leading axes."""
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    lon1, lat1 = np.radians(s1[..., 0]), np.radians(s1[..., 1])
    lon2, lat2 = np.radians(s2[..., 0]), np.radians(s2[..., 1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    if d.ndim == 0:
        return float(d)
    return d


def distance_matrix(sites_a, sites_b=None) -> np.ndarray:
    """Pairwise great-circle distances, (na, nb) km."""
    a = np.atleast_2d(np.asarray(sites_a, dtype=float))
    b = a if sites_b is None else np.atleast_2d(np.asarray(sites_b, dtype=float))
    return distance(a[:, None, :], b[None, :, :])


def exp_cov_matrix(sites, theta: CovParams, dists: np.ndarray | None = None) -> np.ndarray:
    """Exponential covariance matrix: psill*exp(-d/range) off-diagonal,
    psill + nugget on the diagonal. Positive definite whenever nugget > 0.

    ``dists`` short-circuits the distance computation when the caller has the
    matrix cached.
    """
    if not isinstance(theta, CovParams):
        theta = CovParams(*theta)
    if not theta.is_valid():
        raise ValueError(f"invalid covariance parameters {theta}")
    d = distance_matrix(sites) if dists is None else dists
    c = theta.psill * np.exp(-d / theta.range_km)
    np.fill_diagonal(c, theta.psill + theta.nugget)
    return c


def dependogram_matrix(sites, a0: float, dists: np.ndarray | None = None) -> np.ndarray:
    """Copula dependence matrix exp(-d/a0): unit diagonal, entries are
    dependence values, not covariances."""
    if not a0 > 0:
        raise ValueError("copula range a0 must be > 0")
    d = distance_matrix(sites) if dists is None else dists
    return np.exp(-d / a0)


def rbf_basis(s, knots, kernel_ranges) -> np.ndarray:
    """Gaussian kernel values exp(-d(s, knot_i)^2 / a_i^2), each in (0, 1].

    ``s`` may be a single site (returns (k,)) or an (n, 2) array (returns
    (n, k)).
    """
    knots = np.atleast_2d(np.asarray(knots, dtype=float))
    ranges = np.asarray(kernel_ranges, dtype=float)
    if ranges.shape != (knots.shape[0],):
        raise ValueError("kernel_ranges length must match knot count")
    if np.any(ranges <= 0):
        raise ValueError("kernel ranges must be positive")
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    d = distance_matrix(np.atleast_2d(s), knots)
    eta = np.exp(-((d / ranges) ** 2))
    return eta[0] if single else eta


def eval_coefficients(f: RegressionField, s) -> np.ndarray:
    """Spatially varying coefficient vector beta(s) = weights^T eta(s);
    intercept not included."""
    eta = rbf_basis(s, f.knots, f.kernel_ranges)
    return eta @ f.weights


XI_BOUND = 0.5


def surface_values(
    fields: tuple[RegressionField, RegressionField, RegressionField],
    sites,
    covariates,
    w_mu,
    w_sigma,
    w_xi,
    bases: tuple[np.ndarray, ...] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized GEV parameter surfaces at n sites.

    ``covariates`` is (n, p); residuals are (n,) per parameter. Returns
    (mu, sigma, xi) arrays with sigma exponentiated from its log-scale
    surface and xi clamped to [-XI_BOUND, XI_BOUND]. ``bases`` may carry
    precomputed rbf_basis matrices (one per field) to skip the kernel
    evaluation.
    """
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    lins = []
    for i, (f, w) in enumerate(zip(fields, (w_mu, w_sigma, w_xi))):
        eta = rbf_basis(sites, f.knots, f.kernel_ranges) if bases is None else bases[i]
        coef = eta @ f.weights  # (n, p)
        lins.append(f.intercept + np.sum(x * coef, axis=1) + np.asarray(w, dtype=float))
    mu, log_sigma, xi_lin = lins
    return mu, np.exp(log_sigma), np.clip(xi_lin, -XI_BOUND, XI_BOUND)


def eval_gev_surface(
    fields: tuple[RegressionField, RegressionField, RegressionField],
    s,
    covariates,
    residuals,
) -> GevParams:
    """GEV parameters at one site from the three regression surfaces.

    Each parameter is intercept + x(s)^T beta(s) + w(s). The scale surface is
    modeled on the log scale and exponentiated here; the shape is clamped to
    [-0.5, 0.5].
    """
    x = np.asarray(covariates, dtype=float).reshape(1, -1)
    w = [np.array([float(r)]) for r in residuals]
    mu, sigma, xi = surface_values(fields, np.atleast_2d(np.asarray(s, float)), x, *w)
    return GevParams(mu=float(mu[0]), sigma=float(sigma[0]), xi=float(xi[0]))


def _maximin_greedy(d: np.ndarray, start: int, k: int) -> list[int]:
    n = d.shape[0]
    chosen = [start]
    dmin = d[:, start].copy()
    dmin[start] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))  # argmax takes the lowest index on ties
        chosen.append(nxt)
        dmin = np.minimum(dmin, d[:, nxt])
        dmin[nxt] = -np.inf
    return chosen


def _maximin_swap_improve(d: np.ndarray, chosen: list[int]) -> tuple[list[int], float]:
    """Best-improvement pairwise swaps until no swap raises the design's
    minimum inter-point distance."""
    n = d.shape[0]
    k = len(chosen)

    def design_min(idx: list[int]) -> float:
        sub = d[np.ix_(idx, idx)]
        return float(sub[np.triu_indices(len(idx), 1)].min())

    chosen = list(chosen)
    in_design = np.zeros(n, dtype=bool)
    in_design[chosen] = True
    current = design_min(chosen)
    while True:
        free = np.flatnonzero(~in_design)
        best_gain, best_swap = 1e-12, None
        for pos in range(k):
            others = chosen[:pos] + chosen[pos + 1 :]
            if len(others) >= 2:
                sub = d[np.ix_(others, others)]
                base_min = float(sub[np.triu_indices(len(others), 1)].min())
            else:
                base_min = np.inf
            vals = np.minimum(base_min, d[np.ix_(free, others)].min(axis=1))
            j = int(np.argmax(vals))
            gain = float(vals[j]) - current
            if gain > best_gain:
                best_gain, best_swap = gain, (pos, int(free[j]))
        if best_swap is None:
            return chosen, current
        pos, c = best_swap
        in_design[chosen[pos]] = False
        in_design[c] = True
        chosen[pos] = c
        current = design_min(chosen)


def space_filling_knots(candidates, k: int) -> np.ndarray:
    """Approximate maximin design: choose k of the candidate sites to
    maximize the minimum inter-knot distance.

    Greedy farthest-point seeding followed by best-improvement pairwise
    swaps until no swap increases the minimum distance, restarted from a
    fixed set of seed points (candidate closest to the centroid plus the
    extent extremes) with the best local optimum kept. Ties break to the
    lowest candidate index, so the design is deterministic.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    n = cand.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if k == n:
        return cand.copy()
    if k == 1:
        centroid = cand.mean(axis=0)
        return cand[[int(np.argmin(distance(cand, centroid)))]]

    d = distance_matrix(cand)
    centroid = cand.mean(axis=0)
    starts = [int(np.argmin(distance(cand, centroid)))]
    for extreme in (
        np.argmin(cand[:, 0]), np.argmax(cand[:, 0]),
        np.argmin(cand[:, 1]), np.argmax(cand[:, 1]),
    ):
        if int(extreme) not in starts:
            starts.append(int(extreme))

    best_design, best_val = None, -np.inf
    for s in starts:
        design, val = _maximin_swap_improve(d, _maximin_greedy(d, s, k))
        design = sorted(design)
        if val > best_val + 1e-12 or (
            abs(val - best_val) <= 1e-12 and best_design is not None and design < best_design
        ):
            best_design, best_val = design, val
    return cand[np.array(best_design)]


def chol_with_jitter(c: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with the jitter ladder; returns (L, jitter).

    Raises np.linalg.LinAlgError after the ladder is exhausted (signals a
    genuinely non-PD input).
    """
    try:
        return cholesky(c, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_REL * float(np.max(np.diag(c)))
    for _ in range(_JITTER_DOUBLINGS + 1):
        try:
            return cholesky(c + jitter * np.eye(c.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise np.linalg.LinAlgError("matrix not positive definite after jitter ladder")


def krige_conditional(
    theta: CovParams, obs_sites, obs_residuals, target_sites
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional distribution of a zero-mean exponential-covariance
    field at the targets given observed residuals.

    Cross-covariances use the nugget-free kernel psill*exp(-d/range); target
    marginal variances include the nugget, so predictive uncertainty at a new
    cell reflects total variance. Returns (mean (nt,), covariance (nt, nt)).
    """
    if not isinstance(theta, CovParams):
        theta = CovParams(*theta)
    obs_sites = np.atleast_2d(np.asarray(obs_sites, dtype=float))
    target_sites = np.atleast_2d(np.asarray(target_sites, dtype=float))
    w = np.asarray(obs_residuals, dtype=float)

    c_oo = exp_cov_matrix(obs_sites, theta)
    c_to = theta.psill * np.exp(-distance_matrix(target_sites, obs_sites) / theta.range_km)
    c_tt = exp_cov_matrix(target_sites, theta)

    low, _ = chol_with_jitter(c_oo)
    mean = c_to @ cho_solve((low, True), w)
    half = solve_triangular(low, c_to.T, lower=True)
    cov = c_tt - half.T @ half
    return mean, cov


def conditional_simulate(
    theta: CovParams,
    obs_sites,
    obs_residuals,
    target_sites,
    n_draws: int,
    seed,
) -> np.ndarray:
    """Draws from the kriging conditional distribution, (n_draws, nt).

    ``seed`` may be an int or a numpy Generator; identical seeds give
    identical draws.
    """
    mean, cov = krige_conditional(theta, obs_sites, obs_residuals, target_sites)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    low, _ = chol_with_jitter(cov)
    z = rng.standard_normal((n_draws, mean.size))
    return mean[None, :] + z @ low.T
