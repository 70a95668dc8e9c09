"""Posterior archive: in-memory container for MCMC draws plus a stable
on-disk format.

An archive directory holds ``manifest.json`` (config echo, seeds, parameter
layout, version, per-block acceptance) and one flat ``.npy`` table per
parameter group, shaped (n_chains, n_kept, group_size), plus
``logpost.npy``. Writes are atomic (temp directory then rename) and the
round trip is bit-exact, so identical fits produce byte-identical archives.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class PosteriorArchive:
    param_names: list[str]
    param_groups: dict[str, tuple[int, int]]
    draws: np.ndarray    # (n_chains, n_kept, dim)
    logpost: np.ndarray  # (n_chains, n_kept)
    acceptance: dict[str, list[float]]
    final_scales: dict[str, list[float]]
    seed: int
    config_echo: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def group(self, name: str) -> np.ndarray:
        """Draws for one parameter group, (n_chains, n_kept, size)."""
        start, stop = self.param_groups[name]
        return self.draws[:, :, start:stop]

    def flat_draws(self) -> np.ndarray:
        """All chains pooled, (n_chains * n_kept, dim)."""
        return self.draws.reshape(-1, self.dim)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "config": self.config_echo,
            "n_chains": self.n_chains,
            "n_kept": self.n_kept,
            "dim": self.dim,
            "param_names": self.param_names,
            "param_groups": {k: list(v) for k, v in self.param_groups.items()},
            "acceptance": self.acceptance,
            "final_scales": self.final_scales,
        }
        with open(tmp / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        for name, (start, stop) in self.param_groups.items():
            np.save(tmp / f"{name}.npy", np.ascontiguousarray(self.draws[:, :, start:stop]))
        np.save(tmp / "logpost.npy", self.logpost)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "PosteriorArchive":
        path = Path(path)
        with open(path / "manifest.json") as f:
            manifest = json.load(f)
        if manifest["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported archive format {manifest['format_version']}")
        groups = {k: tuple(v) for k, v in manifest["param_groups"].items()}
        draws = np.empty((manifest["n_chains"], manifest["n_kept"], manifest["dim"]))
        for name, (start, stop) in groups.items():
            draws[:, :, start:stop] = np.load(path / f"{name}.npy")
        return cls(
            param_names=manifest["param_names"],
            param_groups=groups,
            draws=draws,
            logpost=np.load(path / "logpost.npy"),
            acceptance=manifest["acceptance"],
            final_scales=manifest["final_scales"],
            seed=manifest["seed"],
            config_echo=manifest["config"],
        )
