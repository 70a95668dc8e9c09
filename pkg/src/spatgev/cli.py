"""Pipeline orchestration.

Subcommands: ``fit``, ``grid``, ``validate``, ``validate-groups``,
``diag-copula``, ``convert-ghcn``, ``simulate``. Every command is
deterministic given (config, seed); outputs are overwritten atomically.
Exit codes: 0 success, 2 config error, 3 convergence failure, 4 data error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from . import gridding, ingest, simulate
from .archive import PosteriorArchive
from .config import RunConfig
from .copula import asymptotic_independence_test
from .errors import ConfigError, ConvergenceError, DataError, SpatgevError
from .sampler import ChainConfig, effective_sample_size, rhat, run_chains
from .spatial import space_filling_knots
from .target import build_target, make_layout

RHAT_LIMIT = 1.1


def _write_atomic(df: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    df.to_csv(tmp, index=False)
    os.replace(tmp, path)


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


def load_observations(config: RunConfig):
    if not config.data:
        raise ConfigError("config.data must point at the daily CSV data")
    for name, p in config.covariates.items():
        if not Path(p).is_file():
            raise ConfigError(f"covariate grid {name!r} not found at {p}")
    season = ingest.SeasonSpec(config.season)
    return ingest.ingest_observations(
        config.data,
        config.covariates,
        season,
        config.years,
        min_years=config.min_years,
        missing_threshold=config.missing_threshold,
        standardize=config.standardize,
    )


def fit_knots(config: RunConfig, obs) -> np.ndarray:
    return space_filling_knots(obs.sites, min(config.knots, obs.n_stations))


def diagnostics_table(archive: PosteriorArchive) -> pd.DataFrame:
    rows = []
    for i, name in enumerate(archive.param_names):
        d = archive.draws[:, :, i]
        r = rhat(d) if archive.n_chains >= 2 else float("nan")
        try:
            ess = effective_sample_size(d)
        except ValueError:
            ess = float("nan")
        rows.append(
            {
                "parameter": name,
                "rhat": r,
                "ess": ess,
                "mean": float(d.mean()),
                "sd": float(d.std(ddof=1)),
            }
        )
    return pd.DataFrame(rows)


def cmd_fit(config: RunConfig, strict: bool = True, obs=None, out_dir=None):
    """Ingest, fit and archive; returns (archive, diagnostics DataFrame)."""
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    if obs is None:
        obs = load_observations(config)
    knots = fit_knots(config, obs)
    target = build_target(obs, knots, config.group_size, seed=config.seed)
    cc = ChainConfig(
        n_chains=config.chains.n_chains,
        n_iterations=config.chains.n_iterations,
        n_warmup=config.chains.n_warmup,
        seed=config.seed,
        adapt_window=config.chains.adapt_window,
        init_jitter=config.chains.init_jitter,
        refresh_every=config.chains.refresh_every,
        n_jobs=config.chains.n_jobs,
    )
    archive = run_chains(target, cc)
    archive.save(out / "archive")
    diag = diagnostics_table(archive)
    _write_atomic(diag, out / "diagnostics.csv")
    config.to_yaml(out / "config_echo.yaml")

    finite = diag["rhat"].dropna()
    worst = float(finite.max()) if len(finite) else float("nan")
    n_bad = int((finite >= RHAT_LIMIT).sum())
    print(
        f"fit: {obs.n_stations} stations ({int(obs.complete_mask.sum())} complete), "
        f"{archive.n_chains} chains x {archive.n_kept} kept draws; "
        f"max rhat {worst:.4f}, {n_bad} parameter(s) >= {RHAT_LIMIT}"
    )
    if strict and n_bad:
        raise ConvergenceError(
            f"{n_bad} parameter(s) with rhat >= {RHAT_LIMIT} (worst {worst:.4f}); "
            "rerun with more iterations or --no-strict"
        )
    return archive, diag


def _grid_inputs(config: RunConfig, obs):
    knots = fit_knots(config, obs)
    layout = make_layout(obs.n_stations, knots.shape[0], obs.n_covariates, knots)
    cells = gridding.make_grid_cells(config.grid.extent, config.grid.spacing)
    names = sorted(config.covariates)
    grids = {n: ingest.CovariateGrid.from_csv(config.covariates[n]) for n in names}
    raw = np.column_stack([grids[n].value_at(cells) for n in names]) if names else np.empty((cells.shape[0], 0))
    mean = obs.covariate_mean if obs.covariate_mean is not None else np.zeros(raw.shape[1])
    sd = obs.covariate_sd if obs.covariate_sd is not None else np.ones(raw.shape[1])
    x_cells = (raw - mean) / sd if config.standardize and raw.shape[1] else raw
    return layout, cells, x_cells


def _cells_geojson(cells: np.ndarray, spacing: float, tables: dict) -> dict:
    feats = []
    h = spacing / 2.0
    for i, (lon, lat) in enumerate(cells):
        props = {}
        for r, t in tables.items():
            props[f"q025_{r:g}"] = float(t["q025"][i])
            props[f"median_{r:g}"] = float(t["median"][i])
            props[f"q975_{r:g}"] = float(t["q975"][i])
        feats.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[
                        [lon - h, lat - h], [lon + h, lat - h], [lon + h, lat + h],
                        [lon - h, lat + h], [lon - h, lat - h],
                    ]],
                },
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def cmd_grid(config: RunConfig, archive_path=None, obs=None, out_dir=None):
    """Gridded return-level summaries from a fitted archive."""
    out = Path(out_dir if out_dir is not None else config.out)
    if obs is None:
        obs = load_observations(config)
    layout, cells, x_cells = _grid_inputs(config, obs)
    archive = PosteriorArchive.load(Path(archive_path) if archive_path else out / "archive")
    results = gridding.grid_return_levels(
        archive,
        layout,
        obs,
        cells,
        x_cells,
        config.return_periods,
        thin_every=config.grid.thin_every,
        max_draws=config.grid.max_draws,
        cell_block=config.grid.cell_block,
        seed=config.seed,
    )
    for r, t in results.items():
        df = pd.DataFrame(
            {
                "lon": cells[:, 0],
                "lat": cells[:, 1],
                "q025": t["q025"],
                "median": t["median"],
                "q975": t["q975"],
            }
        )
        _write_atomic(df, out / f"return_level_{r:g}.csv")
    if config.grid.geojson:
        _write_json(_cells_geojson(cells, config.grid.spacing, results), out / "return_levels.geojson")
    print(f"grid: {cells.shape[0]} cells x {len(results)} return periods -> {out}")
    return results, cells


def _largest_sign_region_fraction(cells: np.ndarray, diff: np.ndarray, spacing: float) -> float:
    """Fraction of cells in the largest 4-connected same-sign component."""
    lon = np.round((cells[:, 0] - cells[:, 0].min()) / spacing).astype(int)
    lat = np.round((cells[:, 1] - cells[:, 1].min()) / spacing).astype(int)
    sign = np.sign(diff)
    index = {(a, b): i for i, (a, b) in enumerate(zip(lon, lat))}
    seen = np.zeros(cells.shape[0], dtype=bool)
    best = 0
    for start in range(cells.shape[0]):
        if seen[start] or sign[start] == 0:
            continue
        stack, comp = [start], 0
        seen[start] = True
        while stack:
            i = stack.pop()
            comp += 1
            for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                j = index.get((lon[i] + da, lat[i] + db))
                if j is not None and not seen[j] and sign[j] == sign[i]:
                    seen[j] = True
                    stack.append(j)
        best = max(best, comp)
    return best / cells.shape[0]


def cmd_validate(config: RunConfig, archive_path=None):
    """Cross-validation: refit on a random station subset and map the
    difference of median return levels against the full fit."""
    out = Path(config.out)
    obs = load_observations(config)

    if archive_path:
        full_archive = PosteriorArchive.load(Path(archive_path))
        layout, cells, x_cells = _grid_inputs(config, obs)
    else:
        full_archive, _ = cmd_fit(config, strict=False, obs=obs, out_dir=out / "full")
        layout, cells, x_cells = _grid_inputs(config, obs)

    rng = np.random.default_rng([config.seed, 555])
    m = obs.n_stations
    n_drop = int(round(config.drop_fraction * m))
    dropped = np.sort(rng.choice(m, size=n_drop, replace=False)) if n_drop else np.array([], int)
    keep = np.setdiff1d(np.arange(m), dropped)
    sub_obs = ingest.ObservationSet(
        station_ids=[obs.station_ids[i] for i in keep],
        sites=obs.sites[keep],
        covariates=obs.covariates[keep],
        maxima=obs.maxima[:, keep],
        years=obs.years,
        complete_mask=obs.complete_mask[keep],
        covariate_names=obs.covariate_names,
        covariate_mean=obs.covariate_mean,
        covariate_sd=obs.covariate_sd,
    )
    sub_archive, _ = cmd_fit(config, strict=False, obs=sub_obs, out_dir=out / "subset")
    sub_knots = space_filling_knots(sub_obs.sites, min(config.knots, sub_obs.n_stations))
    sub_layout = make_layout(sub_obs.n_stations, sub_knots.shape[0], sub_obs.n_covariates, sub_knots)

    periods = [float(r) for r in config.return_periods]
    grid_kw = dict(
        thin_every=config.grid.thin_every,
        max_draws=config.grid.max_draws,
        cell_block=config.grid.cell_block,
        seed=config.seed,
    )
    full = gridding.grid_return_levels(full_archive, layout, obs, cells, x_cells, periods, **grid_kw)
    sub = gridding.grid_return_levels(sub_archive, sub_layout, sub_obs, cells, x_cells, periods, **grid_kw)

    summary = {"n_stations": m, "n_dropped": int(n_drop), "drop_fraction": config.drop_fraction, "periods": {}}
    for r in periods:
        diff = sub[r]["median"] - full[r]["median"]
        se_full = gridding.bootstrap_median_se(full[r]["draws"], seed=config.seed + 1)
        se_sub = gridding.bootstrap_median_se(sub[r]["draws"], seed=config.seed + 2)
        mc_bound = 3.0 * float(np.sqrt(np.mean(se_full**2 + se_sub**2)))
        df = pd.DataFrame({"lon": cells[:, 0], "lat": cells[:, 1], "diff": diff})
        _write_atomic(df, out / f"difference_{r:g}.csv")
        summary["periods"][f"{r:g}"] = {
            "rms_diff": float(np.sqrt(np.mean(diff**2))),
            "mc_noise_bound": mc_bound,
            "quantiles": {
                q: float(np.percentile(diff, qq))
                for q, qq in (("q05", 5), ("q25", 25), ("q50", 50), ("q75", 75), ("q95", 95))
            },
            "largest_sign_region_fraction": _largest_sign_region_fraction(
                cells, diff, config.grid.spacing
            ),
        }
    _write_json(summary, out / "validate_summary.json")
    print(
        f"validate: dropped {n_drop}/{m} stations; "
        + "; ".join(
            f"r={r}: rms {v['rms_diff']:.3f} (mc bound {v['mc_noise_bound']:.3f})"
            for r, v in summary["periods"].items()
        )
    )
    return summary


def relative_rms(a: np.ndarray, b: np.ndarray) -> float:
    scale = float(np.sqrt(np.mean(((a + b) / 2.0) ** 2)))
    return float(np.sqrt(np.mean((a - b) ** 2)) / scale)


def cmd_validate_groups(config: RunConfig, sizes):
    """Refit with several composite group sizes on identical data/seed and
    compare the gridded return-level medians."""
    sizes = sorted(int(s) for s in sizes)
    if not sizes:
        raise ConfigError("need at least one group size")
    out = Path(config.out)
    obs = load_observations(config)
    layout, cells, x_cells = _grid_inputs(config, obs)

    periods = [float(r) for r in config.return_periods]
    medians: dict[int, dict[float, np.ndarray]] = {}
    widths: dict[int, dict[float, float]] = {}
    for n_g in sizes:
        cfg_g = RunConfig.from_dict({**config.to_dict(), "group_size": n_g})
        archive, _ = cmd_fit(cfg_g, strict=False, obs=obs, out_dir=out / f"size_{n_g}")
        res = gridding.grid_return_levels(
            archive, layout, obs, cells, x_cells, periods,
            thin_every=config.grid.thin_every, max_draws=config.grid.max_draws,
            cell_block=config.grid.cell_block, seed=config.seed,
        )
        medians[n_g] = {r: res[r]["median"] for r in periods}
        widths[n_g] = {r: float(np.mean(res[r]["q975"] - res[r]["q025"])) for r in periods}
        for r in periods:
            df = pd.DataFrame(
                {"lon": cells[:, 0], "lat": cells[:, 1], "median": res[r]["median"]}
            )
            _write_atomic(df, out / f"medians_size{n_g}_r{r:g}.csv")

    rows = []
    for r in periods:
        for a, b in itertools.combinations(sizes, 2):
            rows.append(
                {
                    "return_period": r,
                    "size_a": a,
                    "size_b": b,
                    "rms_relative_diff": relative_rms(medians[a][r], medians[b][r]),
                }
            )
    comparison = pd.DataFrame(rows, columns=["return_period", "size_a", "size_b", "rms_relative_diff"])
    _write_atomic(comparison, out / "group_size_comparison.csv")
    width_df = pd.DataFrame(
        [{"group_size": s, **{f"width_r{r:g}": widths[s][r] for r in periods}} for s in sizes]
    )
    _write_atomic(width_df, out / "group_size_widths.csv")
    print(f"validate-groups: sizes {sizes}; wrote comparison and widths tables -> {out}")
    return {"sizes": sizes, "comparison": comparison, "widths": width_df, "medians": medians}


def cmd_diag_copula(config: RunConfig):
    """Asymptotic-independence tests over complete-station pairs."""
    out = Path(config.out)
    obs = load_observations(config)
    comp = obs.complete_indices()
    if comp.size < 2:
        raise DataError("need at least two complete stations for the dependence diagnostic")
    pairs = list(itertools.combinations(comp.tolist(), 2))
    if len(pairs) > config.diag.pair_cap:
        rng = np.random.default_rng([config.seed, 777])
        idx = rng.choice(len(pairs), size=config.diag.pair_cap, replace=False)
        pairs = [pairs[i] for i in sorted(idx)]
    dependent = []
    for i, j in pairs:
        res = asymptotic_independence_test(
            obs.maxima[:, i], obs.maxima[:, j], p=config.diag.p, alpha=config.diag.alpha
        )
        if not res.reject_dependence:
            dependent.append(
                {
                    "station_a": obs.station_ids[i],
                    "lon_a": obs.sites[i, 0],
                    "lat_a": obs.sites[i, 1],
                    "station_b": obs.station_ids[j],
                    "lon_b": obs.sites[j, 0],
                    "lat_b": obs.sites[j, 1],
                    "chi_hat": res.chi_hat,
                }
            )
    frac = len(dependent) / len(pairs)
    report = {
        "n_pairs_tested": len(pairs),
        "n_dependent": len(dependent),
        "dependent_fraction": frac,
        "p": config.diag.p,
        "alpha": config.diag.alpha,
    }
    _write_json(report, out / "copula_diag.json")
    _write_atomic(
        pd.DataFrame(
            dependent,
            columns=["station_a", "lon_a", "lat_a", "station_b", "lon_b", "lat_b", "chi_hat"],
        ),
        out / "dependent_pairs.csv",
    )
    print(
        f"diag-copula: {len(pairs)} pairs tested, {len(dependent)} dependent "
        f"({100 * frac:.2f}%) at the {100 * (1 - config.diag.alpha):g}% level"
    )
    return report


def cmd_convert_ghcn(dly_path, stations_file, out_csv):
    stations = ingest.read_ghcn_stations(stations_file)
    n = ingest.convert_ghcn_dly(dly_path, stations, out_csv)
    print(f"convert-ghcn: wrote {n} daily rows -> {out_csv}")
    return n


def cmd_simulate(out_dir, m, n_years, k, seed, season):
    out = simulate.write_synthetic_dataset(
        out_dir, m=m, n_years=n_years, k=k, seed=seed, season=season
    )
    cfg = RunConfig.from_dict(
        {
            "data": str(out / "daily.csv"),
            "covariates": {
                "elevation": str(out / "covariates" / "elevation.csv"),
                "mean_seasonal_precip": str(out / "covariates" / "mean_seasonal_precip.csv"),
            },
            "out": str(out / "outputs"),
            "season": season,
            "first_year": 1950,
            "last_year": 1950 + n_years - 1,
            "knots": k,
            "seed": seed,
            "grid": {"spacing": 0.5, "extent": [-116.0, -110.0, 38.0, 44.0], "max_draws": 300},
        }
    )
    cfg.to_yaml(out / "config.yaml")
    print(f"simulate: wrote synthetic dataset ({m} stations x {n_years} years) -> {out}")
    return out


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    d = config.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "season", None) is not None:
        d["season"] = args.season
    if getattr(args, "out", None) is not None:
        d["out"] = args.out
    return RunConfig.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatgev",
        description="Hierarchical Bayesian spatial modeling of precipitation extremes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--season", default=None, help="override config season")
        p.add_argument("--out", default=None, help="override output directory")

    p_fit = sub.add_parser("fit", help="ingest data, run chains, archive the posterior")
    common(p_fit)
    p_fit.add_argument("--no-strict", action="store_true", help="do not fail on rhat >= 1.1")

    p_grid = sub.add_parser("grid", help="gridded return levels from an archive")
    common(p_grid)
    p_grid.add_argument("--archive", default=None, help="archive directory (default <out>/archive)")

    p_val = sub.add_parser("validate", help="drop-stations cross-validation")
    common(p_val)
    p_val.add_argument("--archive", default=None, help="reuse an existing full-fit archive")

    p_vg = sub.add_parser("validate-groups", help="group-size sensitivity experiment")
    common(p_vg)
    p_vg.add_argument("--sizes", required=True, help="comma-separated group sizes, e.g. 2,10,30")

    p_diag = sub.add_parser("diag-copula", help="asymptotic-independence diagnostics")
    common(p_diag)

    p_conv = sub.add_parser("convert-ghcn", help="GHCN-Daily .dly to canonical CSV")
    p_conv.add_argument("--dly", required=True, help=".dly file or directory")
    p_conv.add_argument("--stations-file", required=True, help="ghcnd-stations.txt metadata")
    p_conv.add_argument("--out", required=True, help="output CSV path")

    p_sim = sub.add_parser("simulate", help="write a synthetic dataset and config")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--stations", type=int, default=40)
    p_sim.add_argument("--years", type=int, default=60)
    p_sim.add_argument("--knots", type=int, default=4)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--season", default="SON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert-ghcn":
            cmd_convert_ghcn(args.dly, args.stations_file, args.out)
            return 0
        if args.command == "simulate":
            cmd_simulate(args.out, args.stations, args.years, args.knots, args.seed, args.season)
            return 0
        config = _apply_overrides(RunConfig.from_yaml(args.config), args)
        if args.command == "fit":
            cmd_fit(config, strict=not args.no_strict)
        elif args.command == "grid":
            cmd_grid(config, archive_path=args.archive)
        elif args.command == "validate":
            cmd_validate(config, archive_path=args.archive)
        elif args.command == "validate-groups":
            sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
            cmd_validate_groups(config, sizes)
        elif args.command == "diag-copula":
            cmd_diag_copula(config)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ConvergenceError as e:
        print(f"convergence failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 4
    except SpatgevError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
