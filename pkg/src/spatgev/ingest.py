"""Turns daily station precipitation into an observation set: 3-day rolling
sums, seasonal block maxima, missing-data screening, covariate attachment and
prediction-grid support.

Canonical input is headered CSV with columns
``station_id, lon, lat, date, prcp`` (ISO-8601 dates, precipitation in mm,
empty or absent day = missing), either one combined file or one file per
station in a directory. A converter from GHCN-Daily fixed-width ``.dly``
archives to this schema is provided (``spatgev convert-ghcn``).

Season handling: the four standard climatological seasons; winter (DJF) is
labeled by the January year, so December 1989 belongs to winter 1990.
Rolling 3-day windows never cross a season boundary, and a window containing
any missing day is dropped. A season-year qualifies when at most 25% of its
days are missing (inclusive threshold).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError
from .model import ObservationSet

CANONICAL_COLUMNS = ["station_id", "lon", "lat", "date", "prcp"]

SEASONS = {
    "DJF": (12, 1, 2),
    "MAM": (3, 4, 5),
    "JJA": (6, 7, 8),
    "SON": (9, 10, 11),
}


@dataclass(frozen=True)
class SeasonSpec:
    name: str

    def __post_init__(self):
        if self.name not in SEASONS:
            raise ValueError(f"season must be one of {sorted(SEASONS)}, got {self.name!r}")

    @property
    def months(self) -> tuple[int, int, int]:
        return SEASONS[self.name]

    def days(self, year: int) -> pd.DatetimeIndex:
        """Calendar days of this season for the given season-year."""
        if self.name == "DJF":
            start = pd.Timestamp(year - 1, 12, 1)
            end = pd.Timestamp(year, 3, 1) - pd.Timedelta(days=1)
        else:
            m0 = self.months[0]
            start = pd.Timestamp(year, m0, 1)
            end = pd.Timestamp(year, m0 + 3, 1) - pd.Timedelta(days=1)
        return pd.date_range(start, end, freq="D")


def load_daily(path) -> pd.DataFrame:
    """Read canonical daily CSV data from a file or a directory of files."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataError(f"no .csv files under {path}")
        frames = [pd.read_csv(f) for f in files]
        df = pd.concat(frames, ignore_index=True)
    elif path.is_file():
        df = pd.read_csv(path)
    else:
        raise DataError(f"daily data path does not exist: {path}")
    missing_cols = [c for c in CANONICAL_COLUMNS if c not in df.columns]
    if missing_cols:
        raise DataError(f"daily CSV missing columns {missing_cols} (schema: {CANONICAL_COLUMNS})")
    df = df.copy()
    df["date"] = pd.to_datetime(df["date"])
    df["prcp"] = pd.to_numeric(df["prcp"], errors="coerce")
    neg = df["prcp"] < 0
    if bool(neg.any()):
        raise DataError(f"{int(neg.sum())} negative precipitation values in {path}")
    dup = df.duplicated(subset=["station_id", "date"])
    if bool(dup.any()):
        raise DataError(f"duplicate station/date rows in {path}")
    return df


def station_series(daily: pd.DataFrame) -> dict[str, pd.Series]:
    """Per-station daily series (date-indexed), station ids sorted."""
    out = {}
    for sid, grp in daily.groupby("station_id", sort=True):
        out[str(sid)] = pd.Series(
            grp["prcp"].to_numpy(), index=pd.DatetimeIndex(grp["date"]), name=str(sid)
        ).sort_index()
    return out


def station_sites(daily: pd.DataFrame) -> dict[str, tuple[float, float]]:
    coords = daily.groupby("station_id", sort=True)[["lon", "lat"]].agg(["min", "max"])
    out = {}
    for sid, row in coords.iterrows():
        if row[("lon", "min")] != row[("lon", "max")] or row[("lat", "min")] != row[("lat", "max")]:
            raise DataError(f"station {sid} has inconsistent coordinates")
        lon, lat = float(row[("lon", "min")]), float(row[("lat", "min")])
        if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
            raise DataError(f"station {sid} coordinates out of range: ({lon}, {lat})")
        out[str(sid)] = (lon, lat)
    return out


def rolling_3day_sums(series: pd.Series, season: SeasonSpec, year: int) -> np.ndarray:
    """All 3-consecutive-day sums with the window fully inside the season;
    windows touching a missing day are dropped."""
    days = season.days(year)
    vals = series.reindex(days).to_numpy(dtype=float)
    if vals.size < 3:
        return np.empty(0)
    sums = vals[:-2] + vals[1:-1] + vals[2:]
    return sums[np.isfinite(sums)]


def seasonal_maxima(
    series: pd.Series,
    season: SeasonSpec,
    years,
    missing_threshold: float = 0.25,
) -> pd.Series:
    """Per-year maxima of the 3-day sums; NaN where the season-year has more
    than ``missing_threshold`` of its days missing (threshold inclusive:
    exactly 25% missing is retained) or no valid window at all."""
    out = {}
    for year in years:
        days = season.days(year)
        vals = series.reindex(days).to_numpy(dtype=float)
        frac_missing = float(np.mean(~np.isfinite(vals)))
        if frac_missing > missing_threshold:
            out[year] = np.nan
            continue
        sums = vals[:-2] + vals[1:-1] + vals[2:]
        sums = sums[np.isfinite(sums)]
        out[year] = float(np.max(sums)) if sums.size else np.nan
    return pd.Series(out, name=series.name)


def seasonal_maxima_table(
    daily: pd.DataFrame,
    season: SeasonSpec,
    years,
    missing_threshold: float = 0.25,
) -> tuple[pd.DataFrame, dict[str, tuple[float, float]]]:
    """Maxima for every station (columns) and year (rows), plus coordinates."""
    years = list(years)
    series = station_series(daily)
    sites = station_sites(daily)
    table = pd.DataFrame(
        {sid: seasonal_maxima(s, season, years, missing_threshold) for sid, s in series.items()},
        index=years,
    )
    return table, sites


def screen_stations(
    maxima: pd.DataFrame,
    sites: dict[str, tuple[float, float]],
    min_years: int = 30,
) -> ObservationSet:
    """Keep stations with strictly more than ``min_years`` non-missing
    seasonal maxima; an observation-set skeleton with an empty covariate
    matrix comes back (attach covariates next)."""
    counts = maxima.notna().sum(axis=0)
    keep = sorted(str(s) for s in counts.index[counts > min_years])
    if not keep:
        raise DataError(f"no station has more than {min_years} non-missing years")
    sub = maxima[keep]
    m = len(keep)
    return ObservationSet(
        station_ids=keep,
        sites=np.array([sites[s] for s in keep], dtype=float),
        covariates=np.empty((m, 0)),
        maxima=sub.to_numpy(dtype=float),
        years=np.asarray(sub.index, dtype=int),
        complete_mask=sub.notna().all(axis=0).to_numpy(),
    )


@dataclass
class CovariateGrid:
    """Regular lon/lat grid of one covariate, loaded from a lon,lat,value
    CSV; spacing and extent are inferred and validated."""

    lons: np.ndarray
    lats: np.ndarray
    grid: np.ndarray  # (n_lat, n_lon)
    spacing: float

    @classmethod
    def from_csv(cls, path) -> "CovariateGrid":
        df = pd.read_csv(path)
        for c in ("lon", "lat", "value"):
            if c not in df.columns:
                raise DataError(f"covariate grid {path} missing column {c!r}")
        lons = np.unique(df["lon"].to_numpy(dtype=float))
        lats = np.unique(df["lat"].to_numpy(dtype=float))
        dl = np.diff(lons)
        db = np.diff(lats)
        spacing = float(np.median(np.concatenate([dl, db])))
        if spacing <= 0 or not (
            np.allclose(dl, spacing, rtol=1e-6, atol=1e-9)
            and np.allclose(db, spacing, rtol=1e-6, atol=1e-9)
        ):
            raise DataError(f"covariate grid {path} is not regular")
        if len(df) != lons.size * lats.size:
            raise DataError(f"covariate grid {path} is not a full rectangle")
        grid = np.full((lats.size, lons.size), np.nan)
        ix = np.searchsorted(lons, df["lon"].to_numpy(dtype=float))
        iy = np.searchsorted(lats, df["lat"].to_numpy(dtype=float))
        grid[iy, ix] = df["value"].to_numpy(dtype=float)
        if np.any(np.isnan(grid)):
            raise DataError(f"covariate grid {path} has missing cells")
        return cls(lons=lons, lats=lats, grid=grid, spacing=spacing)

    def value_at(self, sites, labels=None) -> np.ndarray:
        """Nearest-cell values at (n, 2) lon/lat sites; raises DataError
        listing any site outside the extent (plus half a cell)."""
        sites = np.atleast_2d(np.asarray(sites, dtype=float))
        half = self.spacing / 2.0 + 1e-9
        bad = (
            (sites[:, 0] < self.lons[0] - half)
            | (sites[:, 0] > self.lons[-1] + half)
            | (sites[:, 1] < self.lats[0] - half)
            | (sites[:, 1] > self.lats[-1] + half)
        )
        if np.any(bad):
            which = labels if labels is not None else [str(i) for i in range(sites.shape[0])]
            listed = ", ".join(str(which[i]) for i in np.flatnonzero(bad)[:20])
            raise DataError(f"{int(bad.sum())} site(s) outside covariate grid extent: {listed}")
        ix = np.clip(np.round((sites[:, 0] - self.lons[0]) / self.spacing).astype(int), 0, self.lons.size - 1)
        iy = np.clip(np.round((sites[:, 1] - self.lats[0]) / self.spacing).astype(int), 0, self.lats.size - 1)
        return self.grid[iy, ix]


def attach_covariates(
    skeleton: ObservationSet,
    grids: dict[str, CovariateGrid],
    standardize: bool = True,
) -> ObservationSet:
    """Sample each covariate grid at the station sites (nearest cell) and
    optionally z-score using the station sample; the transform is stored so
    grid/knot covariates can be mapped identically later."""
    names = sorted(grids)
    cols = [grids[n].value_at(skeleton.sites, labels=skeleton.station_ids) for n in names]
    x = np.column_stack(cols) if cols else np.empty((skeleton.n_stations, 0))
    if standardize and x.shape[1]:
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        if np.any(sd == 0):
            flat = [names[j] for j in np.flatnonzero(sd == 0)]
            raise DataError(f"covariate(s) constant across stations: {flat}")
        x = (x - mean) / sd
    else:
        mean = np.zeros(x.shape[1])
        sd = np.ones(x.shape[1])
    return ObservationSet(
        station_ids=skeleton.station_ids,
        sites=skeleton.sites,
        covariates=x,
        maxima=skeleton.maxima,
        years=skeleton.years,
        complete_mask=skeleton.complete_mask,
        covariate_names=names,
        covariate_mean=mean,
        covariate_sd=sd,
    )


def mean_seasonal_precip(
    series: pd.Series,
    season: SeasonSpec,
    years,
    missing_threshold: float = 0.25,
) -> float:
    """Mean over qualifying season-years of the total seasonal precipitation.

    Seasons failing the missing-day screen are excluded; within a qualifying
    season, missing days contribute zero to the total. Raises DataError when
    no season qualifies.
    """
    totals = []
    for year in years:
        days = season.days(year)
        vals = series.reindex(days).to_numpy(dtype=float)
        if float(np.mean(~np.isfinite(vals))) > missing_threshold:
            continue
        totals.append(float(np.nansum(vals)))
    if not totals:
        raise DataError(f"no qualifying {season.name} season for {series.name}")
    return float(np.mean(totals))


def ingest_observations(
    daily_path,
    covariate_paths: dict[str, Path] | dict[str, str],
    season: SeasonSpec,
    years,
    min_years: int = 30,
    missing_threshold: float = 0.25,
    standardize: bool = True,
) -> ObservationSet:
    """Full ingest: daily CSV -> seasonal maxima -> screening -> covariates."""
    daily = load_daily(daily_path)
    table, sites = seasonal_maxima_table(daily, season, years, missing_threshold)
    skeleton = screen_stations(table, sites, min_years)
    grids = {name: CovariateGrid.from_csv(p) for name, p in covariate_paths.items()}
    return attach_covariates(skeleton, grids, standardize=standardize)


# ----------------------------------------------------------------------
# GHCN-Daily fixed-width converter
# ----------------------------------------------------------------------

_GHCN_MISSING = -9999


def read_ghcn_stations(path) -> dict[str, tuple[float, float]]:
    """Coordinates from a ghcnd-stations.txt metadata file (fixed width:
    id 1-11, lat 13-20, lon 22-30)."""
    out = {}
    with open(path) as f:
        for line in f:
            if len(line) < 30:
                continue
            sid = line[0:11].strip()
            try:
                lat = float(line[12:20])
                lon = float(line[21:30])
            except ValueError:
                continue
            out[sid] = (lon, lat)
    return out


def convert_ghcn_dly(dly_path, stations: dict[str, tuple[float, float]], out_csv) -> int:
    """Convert GHCN-Daily ``.dly`` PRCP records (tenths of mm) to the
    canonical CSV schema; returns the number of rows written. Missing values
    are omitted (absent day = missing)."""
    dly_path = Path(dly_path)
    files = sorted(dly_path.glob("*.dly")) if dly_path.is_dir() else [dly_path]
    if not files:
        raise DataError(f"no .dly files under {dly_path}")
    rows = []
    for fp in files:
        with open(fp) as f:
            for line in f:
                if len(line) < 269 or line[17:21] != "PRCP":
                    continue
                sid = line[0:11]
                if sid not in stations:
                    raise DataError(f"station {sid} missing from the stations metadata file")
                year = int(line[11:15])
                month = int(line[15:17])
                lon, lat = stations[sid]
                for day in range(31):
                    start = 21 + day * 8
                    try:
                        raw = int(line[start : start + 5])
                    except ValueError:
                        continue
                    if raw == _GHCN_MISSING:
                        continue
                    try:
                        date = pd.Timestamp(year, month, day + 1)
                    except ValueError:
                        continue  # e.g. Feb 30 slot
                    rows.append((sid, lon, lat, date.strftime("%Y-%m-%d"), raw / 10.0))
    df = pd.DataFrame(rows, columns=CANONICAL_COLUMNS)
    df.to_csv(out_csv, index=False)
    return len(df)
