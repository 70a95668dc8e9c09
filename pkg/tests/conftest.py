import numpy as np
import pytest

from spatgev import simulate
from spatgev.config import RunConfig


@pytest.fixture(scope="session")
def small_obs():
    """Small in-memory network with incomplete stations."""
    obs, truth = simulate.simulate_observations(
        m=25, n_years=12, k=3, seed=42, incomplete_fraction=0.3
    )
    return obs, truth


@pytest.fixture(scope="session")
def synth40_dir(tmp_path_factory):
    """File-backed 40-station synthetic fixture (daily CSV + grids)."""
    out = tmp_path_factory.mktemp("synth40")
    simulate.write_synthetic_dataset(out, m=40, n_years=60, k=4, seed=11)
    return out


def synth40_config(synth40_dir, out_dir, **overrides) -> RunConfig:
    base = {
        "data": str(synth40_dir / "daily.csv"),
        "covariates": {
            "elevation": str(synth40_dir / "covariates" / "elevation.csv"),
            "mean_seasonal_precip": str(synth40_dir / "covariates" / "mean_seasonal_precip.csv"),
        },
        "out": str(out_dir),
        "season": "SON",
        "first_year": 1950,
        "last_year": 2009,
        "knots": 4,
        "group_size": 10,
        "seed": 7,
        "return_periods": [100],
        "chains": {"n_chains": 3, "n_iterations": 1200, "n_warmup": 500, "n_jobs": 2},
        "grid": {
            "spacing": 1.0,
            "extent": [-116.0, -110.0, 38.0, 44.0],
            "thin_every": 5,
            "max_draws": 250,
        },
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            base[key].update(val)
        else:
            base[key] = val
    return RunConfig.from_dict(base)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
