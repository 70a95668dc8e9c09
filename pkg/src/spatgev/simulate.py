"""Synthetic data generation from the full hierarchical model.

Used by the test suite, the acceptance harness and the ``simulate`` CLI
subcommand. Two layers: :func:`simulate_observations` draws an in-memory
observation set (plus the generating truth) directly from the model;
:func:`write_synthetic_dataset` additionally materializes it as daily
precipitation CSVs and covariate grids so the whole ingest -> fit -> grid
pipeline can run against files.

The generating process is the *full* model (complete GP covariances and a
network-wide copula), not the composite approximation used for fitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import gev
from .model import ModelState, ObservationSet
from .spatial import (
    CovParams,
    RegressionField,
    chol_with_jitter,
    distance_matrix,
    exp_cov_matrix,
    space_filling_knots,
    surface_values,
)


@dataclass
class SyntheticTruth:
    """Generating state and the implied GEV surfaces at the stations."""

    state: ModelState
    mu: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    knots: np.ndarray


def _smooth_field(sites: np.ndarray, centers: np.ndarray, scales, amps) -> np.ndarray:
    d = distance_matrix(sites, centers)
    return np.sum(np.asarray(amps) * np.exp(-((d / np.asarray(scales)) ** 2)), axis=1)


def default_truth_params() -> dict:
    return {
        "beta0": (30.0, float(np.log(8.0)), 0.08),
        "weight_sd": (2.0, 0.15, 0.04),
        "theta": (
            CovParams(4.0, 250.0, 0.5),
            CovParams(0.02, 250.0, 0.004),
            CovParams(0.004, 250.0, 0.0008),
        ),
        "a0": 120.0,
    }


def simulate_observations(
    m: int = 150,
    n_years: int = 50,
    k: int = 4,
    seed: int = 0,
    extent: tuple[float, float, float, float] = (-120.0, -110.0, 35.0, 45.0),
    incomplete_fraction: float = 0.3,
    missing_year_fraction: float = 0.15,
    first_year: int = 1960,
    truth_params: dict | None = None,
) -> tuple[ObservationSet, SyntheticTruth]:
    """Draw a station network and seasonal maxima from the full model.

    ``incomplete_fraction`` of the stations lose ``missing_year_fraction`` of
    their years (NaN markers). Covariates are two standardized smooth
    synthetic fields (elevation-like and climatology-like).
    """
    rng = np.random.default_rng(seed)
    pars = default_truth_params() if truth_params is None else truth_params
    lon0, lon1, lat0, lat1 = extent

    sites = np.column_stack(
        [rng.uniform(lon0, lon1, m), rng.uniform(lat0, lat1, m)]
    )

    centers = np.column_stack(
        [rng.uniform(lon0, lon1, 3), rng.uniform(lat0, lat1, 3)]
    )
    elev = _smooth_field(sites, centers, [300.0, 200.0, 400.0], [1500.0, -700.0, 900.0])
    msp = _smooth_field(sites, centers[::-1], [350.0, 250.0, 300.0], [200.0, 120.0, -80.0])
    x = np.column_stack([elev, msp])
    x_mean, x_sd = x.mean(axis=0), x.std(axis=0)
    x_sd[x_sd == 0] = 1.0
    x = (x - x_mean) / x_sd

    knots = space_filling_knots(sites, k)
    fields = []
    for b0, wsd in zip(pars["beta0"], pars["weight_sd"]):
        fields.append(
            RegressionField(
                intercept=b0,
                knots=knots,
                kernel_ranges=rng.uniform(300.0, 600.0, k),
                weights=rng.normal(0.0, wsd, (k, 2)),
            )
        )

    w = []
    for th in pars["theta"]:
        low, _ = chol_with_jitter(exp_cov_matrix(sites, th))
        w.append(low @ rng.standard_normal(m))

    mu, sigma, xi = surface_values(tuple(fields), sites, x, *w)

    # network-wide Gaussian copula draws, one per year
    dep = np.exp(-distance_matrix(sites) / pars["a0"])
    low, _ = chol_with_jitter(dep)
    z = rng.standard_normal((n_years, m)) @ low.T
    u = np.clip(ndtr(z), 1e-12, 1.0 - 1e-12)
    maxima = gev.quantile_values(u, mu, sigma, xi)

    complete = np.ones(m, dtype=bool)
    n_inc = int(round(incomplete_fraction * m))
    if n_inc:
        inc = rng.choice(m, size=n_inc, replace=False)
        complete[inc] = False
        for i in inc:
            n_miss = max(1, int(round(missing_year_fraction * n_years)))
            miss_years = rng.choice(n_years, size=n_miss, replace=False)
            maxima[miss_years, i] = np.nan

    obs = ObservationSet(
        station_ids=[f"S{i:04d}" for i in range(m)],
        sites=sites,
        covariates=x,
        maxima=maxima,
        years=np.arange(first_year, first_year + n_years),
        complete_mask=complete,
        covariate_names=["elevation", "mean_seasonal_precip"],
        covariate_mean=x_mean,
        covariate_sd=x_sd,
    )
    state = ModelState(
        field_mu=fields[0],
        field_sigma=fields[1],
        field_xi=fields[2],
        w_mu=w[0],
        w_sigma=w[1],
        w_xi=w[2],
        theta_mu=pars["theta"][0],
        theta_sigma=pars["theta"][1],
        theta_xi=pars["theta"][2],
        a0=pars["a0"],
    )
    truth = SyntheticTruth(state=state, mu=mu, sigma=sigma, xi=xi, knots=knots)
    return obs, truth


# ----------------------------------------------------------------------
# file-backed fixture for the end-to-end pipeline
# ----------------------------------------------------------------------

_SEASON_DAYS = {"SON": ("09-01", 91), "DJF": ("12-01", 90), "MAM": ("03-01", 92), "JJA": ("06-01", 92)}


def write_synthetic_dataset(
    out_dir,
    m: int = 40,
    n_years: int = 60,
    k: int = 4,
    seed: int = 0,
    extent: tuple[float, float, float, float] = (-116.0, -110.0, 38.0, 44.0),
    season: str = "SON",
    grid_spacing: float = 0.25,
    incomplete_fraction: float = 0.3,
    first_year: int = 1950,
) -> Path:
    """Materialize a synthetic network as pipeline input files.

    Writes ``daily.csv`` (canonical schema), ``covariates/elevation.csv`` and
    ``covariates/mean_seasonal_precip.csv`` grids, and ``truth.json``. Each
    simulated seasonal maximum becomes a single-day precipitation spike, so
    re-ingesting reproduces the drawn maxima exactly; missing years drop 40%
    of their season days and fail the 25% completeness screen.
    """
    import pandas as pd

    out = Path(out_dir)
    (out / "covariates").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed + 777)

    lon0, lon1, lat0, lat1 = extent
    pad = 2.0 * grid_spacing
    glon = np.arange(lon0 - pad, lon1 + pad + grid_spacing / 2, grid_spacing)
    glat = np.arange(lat0 - pad, lat1 + pad + grid_spacing / 2, grid_spacing)
    cell_lon, cell_lat = np.meshgrid(glon, glat)
    cells = np.column_stack([cell_lon.ravel(), cell_lat.ravel()])

    centers = np.column_stack([rng.uniform(lon0, lon1, 3), rng.uniform(lat0, lat1, 3)])
    grid_elev = _smooth_field(cells, centers, [300.0, 200.0, 400.0], [1500.0, -700.0, 900.0])
    grid_msp = _smooth_field(cells, centers[::-1], [350.0, 250.0, 300.0], [200.0, 120.0, -80.0])
    for name, vals in (("elevation", grid_elev), ("mean_seasonal_precip", grid_msp)):
        pd.DataFrame({"lon": cells[:, 0], "lat": cells[:, 1], "value": vals}).to_csv(
            out / "covariates" / f"{name}.csv", index=False
        )

    # stations snap their covariates from the grids with the same
    # nearest-cell rule the ingest uses
    sites = np.column_stack([rng.uniform(lon0, lon1, m), rng.uniform(lat0, lat1, m)])
    ix = np.clip(np.round((sites[:, 0] - glon[0]) / grid_spacing).astype(int), 0, glon.size - 1)
    iy = np.clip(np.round((sites[:, 1] - glat[0]) / grid_spacing).astype(int), 0, glat.size - 1)
    flat = iy * glon.size + ix
    x_raw = np.column_stack([grid_elev[flat], grid_msp[flat]])
    x_mean, x_sd = x_raw.mean(axis=0), x_raw.std(axis=0)
    x_sd[x_sd == 0] = 1.0
    x = (x_raw - x_mean) / x_sd

    pars = default_truth_params()
    knots = space_filling_knots(sites, k)
    fields = []
    for b0, wsd in zip(pars["beta0"], pars["weight_sd"]):
        fields.append(
            RegressionField(
                intercept=b0,
                knots=knots,
                kernel_ranges=rng.uniform(300.0, 600.0, k),
                weights=rng.normal(0.0, wsd, (k, 2)),
            )
        )
    w = []
    for th in pars["theta"]:
        low, _ = chol_with_jitter(exp_cov_matrix(sites, th))
        w.append(low @ rng.standard_normal(m))
    mu, sigma, xi = surface_values(tuple(fields), sites, x, *w)

    dep = np.exp(-distance_matrix(sites) / pars["a0"])
    low, _ = chol_with_jitter(dep)
    z = rng.standard_normal((n_years, m)) @ low.T
    u = np.clip(ndtr(z), 1e-12, 1.0 - 1e-12)
    maxima = np.maximum(gev.quantile_values(u, mu, sigma, xi), 0.01)

    n_inc = int(round(incomplete_fraction * m))
    incomplete = rng.choice(m, size=n_inc, replace=False) if n_inc else np.array([], int)
    missing = np.zeros((n_years, m), dtype=bool)
    for i in incomplete:
        n_miss = max(1, int(round(0.15 * n_years)))
        missing[rng.choice(n_years, size=n_miss, replace=False), i] = True

    start_md, season_len = _SEASON_DAYS[season]
    rows = []
    ids = [f"S{i:04d}" for i in range(m)]
    for i in range(m):
        for t in range(n_years):
            year = first_year + t
            days = pd.date_range(f"{year}-{start_md}", periods=season_len, freq="D")
            vals = np.zeros(season_len)
            spike = int(rng.integers(5, season_len - 5))
            vals[spike] = maxima[t, i]
            if missing[t, i]:
                keep = rng.random(season_len) > 0.4
                days, vals = days[keep], vals[keep]
            rows.append(
                pd.DataFrame(
                    {
                        "station_id": ids[i],
                        "lon": sites[i, 0],
                        "lat": sites[i, 1],
                        "date": days.strftime("%Y-%m-%d"),
                        "prcp": vals,
                    }
                )
            )
    pd.concat(rows, ignore_index=True).to_csv(out / "daily.csv", index=False)

    truth = {
        "seed": seed,
        "m": m,
        "n_years": n_years,
        "first_year": first_year,
        "season": season,
        "station_ids": ids,
        "sites": sites.tolist(),
        "mu": mu.tolist(),
        "sigma": sigma.tolist(),
        "xi": xi.tolist(),
        "a0": pars["a0"],
        "incomplete": sorted(int(i) for i in incomplete),
        "knots": knots.tolist(),
    }
    with open(out / "truth.json", "w") as f:
        json.dump(truth, f, indent=1, sort_keys=True)
    return out
