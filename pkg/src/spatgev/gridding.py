"""Posterior return-level surfaces on a regular grid.

For each (thinned) posterior draw the three regression surfaces are
evaluated at the cells, the residual fields are completed by conditional
simulation given that draw's station residuals and covariance parameters,
and the GEV return-level formula is applied. Per-cell medians and 95%
credible intervals summarize the draws. Cells are processed in blocks that
are conditionally independent given a draw.
"""

from __future__ import annotations

import numpy as np

from . import gev
from .archive import PosteriorArchive
from .errors import ConfigError, DataError
from .model import ObservationSet
from .spatial import chol_with_jitter, distance_matrix, rbf_basis
from .target import ParamLayout

_GAMMAS = ("mu", "sigma", "xi")


def make_grid_cells(extent, spacing: float) -> np.ndarray:
    """Cell centers of the regular grid implied by extent and spacing.

    The extent must be an integral number of cells in each direction (within
    1e-6 of a cell); the cell count is exactly that implied product.
    """
    lon0, lon1, lat0, lat1 = extent
    if lon1 <= lon0 or lat1 <= lat0:
        raise ConfigError(f"degenerate grid extent {extent}")
    n_lon = (lon1 - lon0) / spacing
    n_lat = (lat1 - lat0) / spacing
    if abs(n_lon - round(n_lon)) > 1e-6 or abs(n_lat - round(n_lat)) > 1e-6:
        raise ConfigError(f"extent {extent} is not a whole number of {spacing} cells")
    n_lon, n_lat = int(round(n_lon)), int(round(n_lat))
    lons = lon0 + spacing * (np.arange(n_lon) + 0.5)
    lats = lat0 + spacing * (np.arange(n_lat) + 0.5)
    gx, gy = np.meshgrid(lons, lats)
    return np.column_stack([gx.ravel(), gy.ravel()])


def thin_indices(total: int, thin_every: int, max_draws: int) -> np.ndarray:
    idx = np.arange(0, total, max(thin_every, 1))
    return idx[: max_draws if max_draws else idx.size]


def _field_of(x: np.ndarray, layout: ParamLayout, gamma: str):
    beta0 = float(x[layout.group_slice(f"beta0_{gamma}")][0])
    weights = x[layout.group_slice(f"weights_{gamma}")].reshape(layout.k, layout.p)
    ranges = x[layout.group_slice(f"ranges_{gamma}")]
    w = x[layout.group_slice(f"w_{gamma}")]
    psill, rng_km, nugget = x[layout.group_slice(f"theta_{gamma}")]
    return beta0, weights, ranges, w, (float(psill), float(rng_km), float(nugget))


def simulate_cell_params(
    x: np.ndarray,
    layout: ParamLayout,
    obs: ObservationSet,
    cells: np.ndarray,
    cell_covariates: np.ndarray,
    rng: np.random.Generator,
    cell_block: int = 2000,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One draw's (mu, sigma, xi) at the cells: surface + conditionally
    simulated residuals."""
    out = []
    d_oo = distance_matrix(obs.sites)
    d_to = distance_matrix(cells, obs.sites)
    d_knots = distance_matrix(cells, layout.knots)
    for gamma in _GAMMAS:
        beta0, weights, ranges, w, (psill, rng_km, nugget) = _field_of(x, layout, gamma)
        eta = np.exp(-((d_knots / ranges) ** 2))
        lin = beta0 + np.sum(cell_covariates * (eta @ weights), axis=1)

        c_oo = psill * np.exp(-d_oo / rng_km)
        np.fill_diagonal(c_oo, psill + nugget)
        low, _ = chol_with_jitter(c_oo)
        alpha = np.linalg.solve(low.T, np.linalg.solve(low, w))

        n_cells = cells.shape[0]
        res = np.empty(n_cells)
        for start in range(0, n_cells, cell_block):
            sl = slice(start, min(start + cell_block, n_cells))
            c_to = psill * np.exp(-d_to[sl] / rng_km)
            mean = c_to @ alpha
            half = np.linalg.solve(low, c_to.T)
            c_tt = psill * np.exp(-distance_matrix(cells[sl]) / rng_km)
            np.fill_diagonal(c_tt, psill + nugget)
            cov = c_tt - half.T @ half
            lc, _ = chol_with_jitter(cov)
            res[sl] = mean + lc @ rng.standard_normal(sl.stop - sl.start)
        out.append(lin + res)
    mu, log_sigma, xi_lin = out
    return mu, np.exp(log_sigma), np.clip(xi_lin, -0.5, 0.5)


def grid_return_levels(
    archive: PosteriorArchive,
    layout: ParamLayout,
    obs: ObservationSet,
    cells: np.ndarray,
    cell_covariates: np.ndarray,
    return_periods,
    thin_every: int = 5,
    max_draws: int = 1000,
    cell_block: int = 2000,
    seed: int = 0,
) -> dict[float, dict[str, np.ndarray]]:
    """Per-cell posterior summaries of the return levels.

    Returns {period: {"q025", "median", "q975", "draws"}} where ``draws`` is
    the (n_used_draws, n_cells) matrix backing the percentiles.
    """
    if archive.dim != layout.dim:
        raise DataError(
            f"archive dimension {archive.dim} does not match the model layout "
            f"{layout.dim}; was the archive produced with this config?"
        )
    flat = archive.flat_draws()
    used = thin_indices(flat.shape[0], thin_every, max_draws)
    periods = [float(r) for r in return_periods]
    rl = {r: np.empty((used.size, cells.shape[0])) for r in periods}
    for row, di in enumerate(used):
        rng = np.random.default_rng([seed, int(di)])
        mu, sigma, xi = simulate_cell_params(
            flat[di], layout, obs, cells, cell_covariates, rng, cell_block
        )
        for r in periods:
            rl[r][row] = gev.quantile_values(1.0 - 1.0 / r, mu, sigma, xi)
    out = {}
    for r in periods:
        q = np.percentile(rl[r], [2.5, 50.0, 97.5], axis=0)
        out[r] = {"q025": q[0], "median": q[1], "q975": q[2], "draws": rl[r]}
    return out


def station_param_draws(
    archive: PosteriorArchive,
    layout: ParamLayout,
    obs: ObservationSet,
    thin_every: int = 1,
    max_draws: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior draws of (mu, sigma, xi) at the stations themselves (no
    simulation needed: station residuals are sampled directly); three
    (n_draws, m) arrays."""
    flat = archive.flat_draws()
    used = thin_indices(flat.shape[0], thin_every, max_draws)
    d_knots = distance_matrix(obs.sites, layout.knots)
    m = obs.n_stations
    out = [np.empty((used.size, m)) for _ in range(3)]
    for row, di in enumerate(used):
        x = flat[di]
        for gi, gamma in enumerate(_GAMMAS):
            beta0, weights, ranges, w, _ = _field_of(x, layout, gamma)
            eta = np.exp(-((d_knots / ranges) ** 2))
            out[gi][row] = beta0 + np.sum(obs.covariates * (eta @ weights), axis=1) + w
    return out[0], np.exp(out[1]), np.clip(out[2], -0.5, 0.5)


def station_return_level_draws(
    archive: PosteriorArchive, layout: ParamLayout, obs: ObservationSet, r: float,
    thin_every: int = 1, max_draws: int = 0,
) -> np.ndarray:
    """Return-level draws at the stations themselves, (n_draws, m)."""
    mu, sigma, xi = station_param_draws(archive, layout, obs, thin_every, max_draws)
    return gev.quantile_values(1.0 - 1.0 / r, mu, sigma, xi)


def bootstrap_median_se(draws: np.ndarray, n_boot: int = 200, seed: int = 1) -> np.ndarray:
    """Bootstrap standard error of the per-cell median, (n_cells,).

    ``draws`` is (n_draws, n_cells); resampling is over draws.
    """
    rng = np.random.default_rng(seed)
    n = draws.shape[0]
    idx = rng.integers(0, n, size=(n_boot, n))
    meds = np.median(draws[idx], axis=1)  # (n_boot, n_cells)
    return np.std(meds, axis=0, ddof=1)
