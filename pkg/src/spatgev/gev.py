"""Generalized extreme value distribution: density, CDF, quantiles, return
levels and per-station maximum likelihood fitting.

Shape convention: ``xi > 0`` gives a heavy upper tail with finite lower bound
``mu - sigma/xi``; ``xi < 0`` a finite upper bound; ``xi = 0`` the Gumbel
limit. All functions accept scalar or array ``y`` and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

# below this |xi| the Gumbel limit is used; the general formula loses all
# precision as xi -> 0
GUMBEL_XI_EPS = 1e-8

# hard floor for sigma inside the MLE search
_SIGMA_FLOOR = 1e-10


@dataclass(frozen=True)
class GevParams:
    """Location / scale / shape triple for one site.

    sigma must be positive. The hierarchical model restricts xi to
    [-0.5, 0.5]; standalone MLE fits are unrestricted.
    """

    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


def _check_sigma(sigma) -> None:
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be > 0")


def logpdf_values(y, mu, sigma, xi):
    """GEV log density, vectorized over broadcastable arrays.

    Returns -inf outside the support. Callers own sigma > 0 validation.
    """
    y = np.asarray(y, dtype=float)
    mu, sigma, xi = np.broadcast_arrays(
        np.asarray(mu, float), np.asarray(sigma, float), np.asarray(xi, float)
    )
    z = (y - mu) / sigma
    gumbel = np.abs(xi) < GUMBEL_XI_EPS
    xi_safe = np.where(gumbel, 1.0, xi)
    b = 1.0 + xi_safe * z
    ok = b > 0
    logb = np.log(np.where(ok, b, 1.0))
    general = -np.log(sigma) - (1.0 + 1.0 / xi_safe) * logb - np.exp(-logb / xi_safe)
    limit = -np.log(sigma) - z - np.exp(-z)
    out = np.where(gumbel, limit, np.where(ok, general, -np.inf))
    if out.ndim == 0:
        return float(out)
    return out


def cdf_values(y, mu, sigma, xi):
    """GEV CDF, vectorized; 0/1 at the support boundary depending on xi."""
    y = np.asarray(y, dtype=float)
    mu, sigma, xi = np.broadcast_arrays(
        np.asarray(mu, float), np.asarray(sigma, float), np.asarray(xi, float)
    )
    z = (y - mu) / sigma
    gumbel = np.abs(xi) < GUMBEL_XI_EPS
    xi_safe = np.where(gumbel, 1.0, xi)
    b = 1.0 + xi_safe * z
    ok = b > 0
    logb = np.log(np.where(ok, b, 1.0))
    general = np.exp(-np.exp(-logb / xi_safe))
    # b <= 0: below the lower bound (xi > 0) -> 0, above the upper bound
    # (xi < 0) -> 1
    boundary = np.where(xi_safe > 0, 0.0, 1.0)
    limit = np.exp(-np.exp(-z))
    out = np.where(gumbel, limit, np.where(ok, general, boundary))
    if out.ndim == 0:
        return float(out)
    return out


def quantile_values(q, mu, sigma, xi):
    """GEV quantile function (inverse CDF), vectorized over q in (0, 1)."""
    q = np.asarray(q, dtype=float)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile level must lie in (0, 1)")
    mu, sigma, xi = np.broadcast_arrays(
        np.asarray(mu, float), np.asarray(sigma, float), np.asarray(xi, float)
    )
    t = -np.log(q)  # t > 0
    gumbel = np.abs(xi) < GUMBEL_XI_EPS
    xi_safe = np.where(gumbel, 1.0, xi)
    general = mu + sigma * np.expm1(-xi_safe * np.log(t)) / xi_safe
    limit = mu - sigma * np.log(t)
    out = np.where(gumbel, limit, general)
    if out.ndim == 0:
        return float(out)
    return out


def gev_logpdf(y, p: GevParams):
    """Log density of ``y`` under GEV(p); -inf outside the support."""
    _check_sigma(p.sigma)
    return logpdf_values(y, p.mu, p.sigma, p.xi)


def gev_cdf(y, p: GevParams):
    """P(Y <= y) under GEV(p)."""
    _check_sigma(p.sigma)
    return cdf_values(y, p.mu, p.sigma, p.xi)


def gev_quantile(q, p: GevParams):
    """y such that gev_cdf(y, p) = q, for q in (0, 1)."""
    _check_sigma(p.sigma)
    return quantile_values(q, p.mu, p.sigma, p.xi)


def return_level(r, p: GevParams):
    """Level exceeded on average once per ``r`` blocks: the 1 - 1/r quantile.

    ``r`` must exceed 1 (a 1-block return level is the distribution's lower
    endpoint and is not defined here).
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 1):
        raise ValueError("return period must be > 1")
    return gev_quantile(1.0 - 1.0 / r, p)


def _moment_init(y: np.ndarray) -> tuple[float, float, float]:
    # Gumbel moment estimators; xi started slightly heavy-tailed
    sd = float(np.std(y, ddof=1))
    if sd <= 0:
        sd = max(abs(float(np.mean(y))), 1.0) * 1e-3
    sigma0 = sd * np.sqrt(6.0) / np.pi
    mu0 = float(np.mean(y)) - 0.57721566490153286 * sigma0
    return mu0, sigma0, 0.1


def gev_mle_fit(
    y, init: GevParams | None = None, max_iter: int = 2000
) -> tuple[GevParams, bool]:
    """Maximum likelihood fit by Nelder-Mead on (mu, log sigma, xi).

    Needs at least 10 non-missing values. The search is restarted once from
    its own solution; the fit is flagged converged when the restart improves
    the objective by less than 1e-8. Returns (params, converged). Degenerate
    inputs (e.g. constant series) come back flagged, never raise.
    """
    y = np.asarray(y, dtype=float)
    y = y[np.isfinite(y)]
    if y.size < 10:
        raise ValueError(f"need at least 10 non-missing values, got {y.size}")

    if init is not None:
        x0 = np.array([init.mu, np.log(init.sigma), init.xi])
    else:
        mu0, sigma0, xi0 = _moment_init(y)
        x0 = np.array([mu0, np.log(sigma0), xi0])

    def nll(x):
        mu, ls, xi = x
        sigma = max(float(np.exp(min(ls, 700.0))), _SIGMA_FLOOR)
        ll = logpdf_values(y, mu, sigma, xi)
        total = float(np.sum(ll))
        if not np.isfinite(total):
            return np.inf
        return -total

    if not np.isfinite(nll(x0)):
        x0[2] = 0.0  # Gumbel start has unbounded support

    opts = {"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-12}
    first = minimize(nll, x0, method="Nelder-Mead", options=opts)
    second = minimize(nll, first.x, method="Nelder-Mead", options=opts)
    best = second if second.fun <= first.fun else first
    converged = bool(np.isfinite(best.fun) and first.fun - second.fun < 1e-8)

    mu, ls, xi = best.x
    sigma = max(float(np.exp(min(ls, 700.0))), _SIGMA_FLOOR)
    return GevParams(mu=float(mu), sigma=sigma, xi=float(xi)), converged
