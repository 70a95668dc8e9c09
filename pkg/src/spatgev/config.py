"""Run configuration: a single human-editable YAML file with full defaults.

Every field is overridable; unknown keys are rejected so typos fail fast.
The effective configuration (defaults included) is echoed into every output
directory for provenance, and a config round-trips through its file
representation losslessly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

# the paper-scale study box; a documented preset, not a constraint
WESTERN_US_EXTENT = (-125.0, -100.0, 30.0, 50.0)


@dataclass
class ChainSettings:
    n_chains: int = 3
    n_iterations: int = 3000
    n_warmup: int = 1000
    adapt_window: int = 50
    init_jitter: float = 0.1
    refresh_every: int = 500
    n_jobs: int = 1


@dataclass
class GridSettings:
    spacing: float = 0.125
    extent: tuple[float, float, float, float] = WESTERN_US_EXTENT
    thin_every: int = 5
    max_draws: int = 1000
    cell_block: int = 2000
    geojson: bool = False


@dataclass
class DiagSettings:
    p: float = 0.95
    alpha: float = 0.01
    pair_cap: int = 20000


@dataclass
class RunConfig:
    data: str = ""
    covariates: dict[str, str] = field(default_factory=dict)
    out: str = "outputs"
    season: str = "SON"
    first_year: int = 1950
    last_year: int = 2013
    min_years: int = 30
    missing_threshold: float = 0.25
    standardize: bool = True
    knots: int = 10
    group_size: int = 30
    seed: int = 0
    return_periods: list[float] = field(default_factory=lambda: [2, 25, 50, 100])
    drop_fraction: float = 0.35
    chains: ChainSettings = field(default_factory=ChainSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    diag: DiagSettings = field(default_factory=DiagSettings)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.season not in ("DJF", "MAM", "JJA", "SON"):
            raise ConfigError(f"season must be a standard 3-month season, got {self.season!r}")
        if self.knots < 1:
            raise ConfigError("knot count must be >= 1")
        if self.group_size < 1:
            raise ConfigError("group size must be >= 1")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ConfigError("drop_fraction must lie in [0, 1)")
        if self.chains.n_warmup >= self.chains.n_iterations:
            raise ConfigError("n_warmup must be below n_iterations")
        if self.grid.spacing <= 0:
            raise ConfigError("grid spacing must be positive")
        if any(r <= 1 for r in self.return_periods):
            raise ConfigError("return periods must all exceed 1")
        if self.first_year > self.last_year:
            raise ConfigError("first_year must not exceed last_year")

    @property
    def years(self) -> range:
        return range(self.first_year, self.last_year + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["extent"] = list(self.grid.extent)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw or {})
        kwargs = {}
        nested = {"chains": ChainSettings, "grid": GridSettings, "diag": DiagSettings}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name, sub_cls in nested.items():
            if name in raw:
                sub_raw = raw.pop(name)
                sub_known = {f.name for f in fields(sub_cls)}
                sub_unknown = set(sub_raw) - sub_known
                if sub_unknown:
                    raise ConfigError(f"unknown keys under {name!r}: {sorted(sub_unknown)}")
                if name == "grid" and "extent" in sub_raw:
                    sub_raw["extent"] = tuple(float(v) for v in sub_raw["extent"])
                kwargs[name] = sub_cls(**sub_raw)
        kwargs.update(raw)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            raw = yaml.safe_load(f)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(raw)

    def to_yaml(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True, default_flow_style=False)
