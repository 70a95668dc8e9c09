"""Cached block-update evaluator for the hierarchical posterior.

The sampler updates one parameter block at a time, so most of a full
posterior evaluation is unchanged at every step. This module maintains the
per-group inverse covariance factors, normal scores and quadratic forms, and
computes each block's log-posterior delta through exact algebraic updates
(rank-one identities for single-station moves, full group refreshes when a
covariance parameter moves). load_state() rebuilds everything from scratch
and is the correctness anchor: the deltas must telescope to the reference
``model.log_posterior`` up to roundoff, which the tests enforce.

Layout of the flat parameter vector, in order: for each GEV parameter
(mu, sigma, xi): intercept, basis weights (knot-major), kernel ranges,
station residuals, covariance triple (psill, range_km, nugget); finally the
copula range a0. All values are stored on their natural scale; positive
parameters are proposed multiplicatively (the Jacobian is folded into the
returned delta).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import ndtri

from . import gev, model
from .copula import U_CLIP
from .model import GroupPartition, ModelState, ObservationSet
from .spatial import CovParams, RegressionField, chol_with_jitter, distance_matrix

_LOG_2PI = float(np.log(2.0 * np.pi))
_GAMMAS = model.GAMMA_NAMES


class InitializationError(RuntimeError):
    """Raised when no finite-posterior starting state can be found."""


@dataclass(frozen=True)
class BlockSpec:
    name: str
    dim: int
    target_accept: float
    initial_scale: float
    kind: tuple
    # empirical-covariance proposal adaptation during warmup (for blocks
    # with strong internal correlation); the sampler then needs
    # block_value() to observe the block's coordinates
    adapt_cov: bool = False
    # False for independence-proposal blocks whose innovation must stay a
    # standard normal (no scale adaptation)
    adapt_scale: bool = True


@dataclass
class ParamLayout:
    """Flat-vector layout shared by the sampler, archive and gridding."""

    m: int
    k: int
    p: int
    knots: np.ndarray
    groups: dict[str, tuple[int, int]]
    names: list[str]
    dim: int

    def group_slice(self, name: str) -> slice:
        start, stop = self.groups[name]
        return slice(start, stop)

    def pack(self, state: ModelState) -> np.ndarray:
        x = np.empty(self.dim)
        for name, f, w, th in zip(
            _GAMMAS, state.fields(), state.residuals(), state.thetas()
        ):
            x[self.group_slice(f"beta0_{name}")] = f.intercept
            x[self.group_slice(f"weights_{name}")] = f.weights.ravel()
            x[self.group_slice(f"ranges_{name}")] = f.kernel_ranges
            x[self.group_slice(f"w_{name}")] = w
            x[self.group_slice(f"theta_{name}")] = (th.psill, th.range_km, th.nugget)
        x[self.group_slice("a0")] = state.a0
        return x

    def unpack(self, x: np.ndarray) -> ModelState:
        parts = {}
        for name in _GAMMAS:
            intercept = float(x[self.group_slice(f"beta0_{name}")][0])
            weights = x[self.group_slice(f"weights_{name}")].reshape(self.k, self.p)
            ranges = x[self.group_slice(f"ranges_{name}")].copy()
            w = x[self.group_slice(f"w_{name}")].copy()
            psill, rng, nug = x[self.group_slice(f"theta_{name}")]
            parts[f"field_{name}"] = RegressionField(
                intercept=intercept,
                knots=self.knots,
                kernel_ranges=ranges,
                weights=weights.copy(),
            )
            parts[f"w_{name}"] = w
            parts[f"theta_{name}"] = CovParams(float(psill), float(rng), float(nug))
        return ModelState(a0=float(x[self.group_slice("a0")][0]), **parts)


def make_layout(m: int, k: int, p: int, knots: np.ndarray) -> ParamLayout:
    groups: dict[str, tuple[int, int]] = {}
    names: list[str] = []
    pos = 0

    def add(name: str, size: int, scalar_names: list[str]):
        nonlocal pos
        groups[name] = (pos, pos + size)
        names.extend(scalar_names)
        pos += size

    for g in _GAMMAS:
        add(f"beta0_{g}", 1, [f"beta0_{g}"])
        add(
            f"weights_{g}",
            k * p,
            [f"weights_{g}[{j},{c}]" for j in range(k) for c in range(p)],
        )
        add(f"ranges_{g}", k, [f"ranges_{g}[{j}]" for j in range(k)])
        add(f"w_{g}", m, [f"w_{g}[{i}]" for i in range(m)])
        add(f"theta_{g}", 3, [f"theta_{g}.{c}" for c in ("psill", "range_km", "nugget")])
    add("a0", 1, ["a0"])
    return ParamLayout(m=m, k=k, p=p, knots=np.asarray(knots, float), groups=groups, names=names, dim=pos)


# initial proposal scales per block family and GEV parameter
_INIT_SCALES = {
    "w": {"mu": 0.5, "sigma": 0.1, "xi": 0.04},
    "beta0": {"mu": 0.2, "sigma": 0.05, "xi": 0.02},
    "shift": {"mu": 0.3, "sigma": 0.08, "xi": 0.03},
    "weights": {"mu": 0.1, "sigma": 0.03, "xi": 0.01},
    "range": {"mu": 0.3, "sigma": 0.3, "xi": 0.3},
    "theta": {"mu": 0.2, "sigma": 0.2, "xi": 0.2},
}


class PosteriorTarget:
    """Sampler-facing view of the hierarchical posterior.

    Implements the block-target protocol used by :func:`sampler.run_chains`:
    blocks, init_state, load_state, propose, commit, flat_state.
    """

    def __init__(
        self,
        obs: ObservationSet,
        partition_all: GroupPartition,
        partition_complete: GroupPartition,
        knots,
    ):
        knots = np.atleast_2d(np.asarray(knots, float))
        self.obs = obs
        self.part_all = partition_all
        self.part_comp = partition_complete
        m = obs.n_stations
        self.layout = make_layout(m, knots.shape[0], obs.n_covariates, knots)

        self.X = np.asarray(obs.covariates, float)
        self.Y = np.asarray(obs.maxima, float)
        self.miss = np.isnan(self.Y)
        self.comp = obs.complete_indices()
        self.Y_comp = self.Y[:, self.comp].copy()
        if partition_complete.n_stations != self.comp.size:
            raise ValueError("complete-station partition size mismatch")

        # station -> (group, row) maps and cached distance matrices
        self.gp_groups = partition_all.groups()
        self.gp_of_station = np.empty(m, dtype=int)
        self.gp_row = np.empty(m, dtype=int)
        for g, idx in enumerate(self.gp_groups):
            self.gp_of_station[idx] = g
            self.gp_row[idx] = np.arange(idx.size)
        self.gp_dists = [distance_matrix(obs.sites[idx]) for idx in self.gp_groups]

        self.cop_groups = partition_complete.groups()  # indices into comp positions
        self.cop_of_pos = np.empty(self.comp.size, dtype=int)
        self.cop_row = np.empty(self.comp.size, dtype=int)
        for g, idx in enumerate(self.cop_groups):
            self.cop_of_pos[idx] = g
            self.cop_row[idx] = np.arange(idx.size)
        comp_sites = obs.sites[self.comp]
        self.cop_dists = [distance_matrix(comp_sites[idx]) for idx in self.cop_groups]
        self.pos_of_station = {int(s): i for i, s in enumerate(self.comp)}

        self.knot_dists = distance_matrix(obs.sites, knots)  # (m, k)
        self.blocks = self._build_blocks()
        self.init_center: np.ndarray | None = None
        self._staged = None
        self._valid = False

    # ------------------------------------------------------------------
    # block layout
    # ------------------------------------------------------------------
    def _build_blocks(self) -> list[BlockSpec]:
        blocks = []
        k, p, m = self.layout.k, self.layout.p, self.layout.m
        for gi, g in enumerate(_GAMMAS):
            blocks.append(BlockSpec(f"beta0_{g}", 1, 0.44, _INIT_SCALES["beta0"][g], ("beta0", gi)))
            blocks.append(BlockSpec(f"shift_{g}", 1, 0.44, _INIT_SCALES["shift"][g], ("shift", gi)))
            for j in range(k):
                blocks.append(
                    BlockSpec(f"weights_{g}[{j}]", p, 0.23 if p > 1 else 0.44,
                              _INIT_SCALES["weights"][g], ("weights", gi, j))
                )
            for j in range(k):
                blocks.append(
                    BlockSpec(f"range_{g}[{j}]", 1, 0.44, _INIT_SCALES["range"][g], ("range", gi, j))
                )
            # joint basis-coefficient block: all weights plus log kernel
            # ranges; these trade off strongly, so the proposal covariance
            # is adapted from the chain during warmup
            blocks.append(
                BlockSpec(f"coeffs_{g}", k * p + k, 0.23, _INIT_SCALES["weights"][g],
                          ("coeffs", gi), adapt_cov=True)
            )
            blocks.append(
                BlockSpec(f"theta_{g}", 3, 0.23, _INIT_SCALES["theta"][g], ("theta", gi),
                          adapt_cov=True)
            )
        blocks.append(BlockSpec("a0", 1, 0.44, 0.2, ("a0",)))
        for gi, g in enumerate(_GAMMAS):
            for i in range(self.layout.m):
                blocks.append(BlockSpec(f"w_{g}[{i}]", 1, 0.44, _INIT_SCALES["w"][g], ("w", gi, i)))
        return blocks

    def block_value(self, block_index: int) -> np.ndarray:
        """Current coordinates of an adaptively proposed block (log scale
        for positive components), for proposal-covariance estimation."""
        kind = self.blocks[block_index].kind
        if kind[0] == "coeffs":
            gi = kind[1]
            return np.concatenate([self.weights[gi].ravel(), np.log(self.ranges[gi])])
        if kind[0] == "theta":
            th = self.theta[kind[1]]
            return np.log(np.array([th.psill, th.range_km, th.nugget]))
        raise ValueError(f"block {kind} does not use covariance adaptation")

    @property
    def param_names(self) -> list[str]:
        return self.layout.names

    @property
    def param_groups(self) -> dict[str, tuple[int, int]]:
        return self.layout.groups

    @property
    def dim(self) -> int:
        return self.layout.dim

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------
    def compute_init_center(self) -> np.ndarray:
        """Deterministic starting point: pooled GEV MLE for the intercepts,
        zero weights/residuals, covariance scales from per-station MLE
        spread, ranges at a quarter of the domain diameter."""
        obs = self.obs
        pooled = self.Y[~self.miss]
        pooled_fit, _ = gev.gev_mle_fit(pooled)
        b_mu = pooled_fit.mu
        b_sigma = float(np.log(pooled_fit.sigma))
        b_xi = float(np.clip(pooled_fit.xi, -0.45, 0.45))

        res = {g: [] for g in _GAMMAS}
        init = gev.GevParams(pooled_fit.mu, pooled_fit.sigma, float(np.clip(pooled_fit.xi, -0.45, 0.45)))
        for i in range(obs.n_stations):
            y = self.Y[~self.miss[:, i], i]
            try:
                fit, ok = gev.gev_mle_fit(y, init=init, max_iter=400)
            except ValueError:
                continue
            if not ok:
                continue
            res["mu"].append(fit.mu - b_mu)
            res["sigma"].append(np.log(fit.sigma) - b_sigma)
            res["xi"].append(np.clip(fit.xi, -0.45, 0.45) - b_xi)

        lon0, lat0 = obs.sites.min(axis=0)
        lon1, lat1 = obs.sites.max(axis=0)
        diam = max(float(distance_matrix(np.array([[lon0, lat0]]), np.array([[lon1, lat1]]))[0, 0]), 10.0)
        a_init = diam / 4.0

        x = np.zeros(self.layout.dim)
        defaults = {"mu": 1.0, "sigma": 0.05, "xi": 0.01}
        for g, b0 in zip(_GAMMAS, (b_mu, b_sigma, b_xi)):
            x[self.layout.group_slice(f"beta0_{g}")] = b0
            x[self.layout.group_slice(f"ranges_{g}")] = a_init
            var = float(np.var(res[g])) if len(res[g]) >= 5 else defaults[g]
            var = float(np.clip(var, 1e-4, 100.0))
            x[self.layout.group_slice(f"theta_{g}")] = (var, a_init, 0.1 * var)
        x[self.layout.group_slice("a0")] = a_init
        return x

    def init_state(self, rng: np.random.Generator, jitter: float = 0.0) -> np.ndarray:
        """Overdispersed starting state: the deterministic center plus
        jitter, shrunk back toward the center until every observation lies
        inside its marginal GEV support (a jittered shape surface can
        otherwise bound real maxima out of the distribution)."""
        if self.init_center is None:
            self.init_center = self.compute_init_center()
        center = self.init_center
        x = center.copy()
        if jitter > 0:
            lay = self.layout
            for name, (start, stop) in lay.groups.items():
                z = rng.standard_normal(stop - start)
                if name.startswith(("ranges", "theta")) or name == "a0":
                    x[start:stop] *= np.exp(jitter * z)
                elif name.startswith("w") or name.startswith("weights"):
                    x[start:stop] += 0.3 * jitter * z
                else:
                    x[start:stop] += 0.1 * jitter * z
            for _ in range(60):
                if self._data_layer_finite(x):
                    break
                x = center + 0.5 * (x - center)
            else:
                x = center.copy()
        return x

    def _data_layer_finite(self, x: np.ndarray) -> bool:
        with np.errstate(all="ignore"):
            state = self.layout.unpack(x)
            mu_v, sg_v, xi_v = model.gev_surfaces(state, self.obs)
            ll = gev.logpdf_values(self.Y, mu_v, sg_v, xi_v)
            ll = np.where(self.miss, 0.0, ll)
            return bool(np.isfinite(np.sum(ll)))

    # ------------------------------------------------------------------
    # full cache rebuild
    # ------------------------------------------------------------------
    def load_state(self, x: np.ndarray) -> float:
        """Install a flat state and rebuild every cache; returns the log
        posterior (-inf leaves the target marked invalid)."""
        with np.errstate(all="ignore"):
            return self._load(np.asarray(x, float).copy())

    def _load(self, x: np.ndarray) -> float:
        self._valid = False
        self._staged = None
        self.x = x
        lay = self.layout
        state = lay.unpack(x)

        self.prior_parts = self._prior_parts(state)
        if not np.isfinite(sum(self.prior_parts.values())):
            return -np.inf

        self.beta0 = np.array([f.intercept for f in state.fields()])
        self.weights = [f.weights.copy() for f in state.fields()]
        self.ranges = [f.kernel_ranges.copy() for f in state.fields()]
        self.w = [np.asarray(w, float).copy() for w in state.residuals()]
        self.theta = list(state.thetas())
        self.a0 = state.a0

        self.basis = [np.exp(-((self.knot_dists / r) ** 2)) for r in self.ranges]
        self.lin = [
            self.beta0[gi]
            + np.sum(self.X * (self.basis[gi] @ self.weights[gi]), axis=1)
            + self.w[gi]
            for gi in range(3)
        ]
        self._set_param_vectors()

        if not self._rebuild_data_layer():
            return -np.inf
        if not self._rebuild_gp_layer():
            return -np.inf
        self._valid = True
        return self.log_posterior_value

    def _set_param_vectors(self):
        self.mu_v = self.lin[0]
        self.sg_v = np.exp(self.lin[1])
        self.xi_v = np.clip(self.lin[2], -0.5, 0.5)

    def _prior_parts(self, state: ModelState) -> dict[str, float]:
        parts = {}
        sds = {"mu": model.PRIOR_SD_INTERCEPT, "sigma": model.PRIOR_SD_INTERCEPT,
               "xi": model.PRIOR_SD_XI_INTERCEPT}
        for g, f, th in zip(_GAMMAS, state.fields(), state.thetas()):
            parts[f"beta0_{g}"] = model._normal_lpdf(f.intercept, sds[g])
            parts[f"weights_{g}"] = model._normal_lpdf(f.weights, model.PRIOR_SD_WEIGHTS)
            parts[f"ranges_{g}"] = model._half_normal_lpdf(f.kernel_ranges, model.PRIOR_SD_RANGE)
            sd_var = model.PRIOR_SD_XI_VARIANCE if g == "xi" else model.PRIOR_SD_VARIANCE
            parts[f"theta_{g}"] = (
                model._half_normal_lpdf(th.psill, sd_var)
                + model._half_normal_lpdf(th.nugget, sd_var)
                + model._half_normal_lpdf(th.range_km, model.PRIOR_SD_RANGE)
            )
        parts["a0"] = model._half_normal_lpdf(state.a0, model.PRIOR_SD_RANGE)
        return parts

    def _station_loglik(self, mu_v, sg_v, xi_v) -> np.ndarray:
        ll = gev.logpdf_values(self.Y, mu_v, sg_v, xi_v)
        return np.sum(np.where(self.miss, 0.0, ll), axis=0)

    def _normal_scores(self, mu_v, sg_v, xi_v) -> np.ndarray:
        f = gev.cdf_values(self.Y_comp, mu_v[self.comp], sg_v[self.comp], xi_v[self.comp])
        return ndtri(np.clip(f, U_CLIP, 1.0 - U_CLIP))

    def _rebuild_data_layer(self) -> bool:
        self.station_ll = self._station_loglik(self.mu_v, self.sg_v, self.xi_v)
        if not np.isfinite(np.sum(self.station_ll)):
            return False
        self.U = self._normal_scores(self.mu_v, self.sg_v, self.xi_v)
        self.cop = []
        for idx, d in zip(self.cop_groups, self.cop_dists):
            sig = np.exp(-d / self.a0)
            try:
                low, _ = chol_with_jitter(sig)
            except np.linalg.LinAlgError:
                return False
            a_inv = cho_solve((low, True), np.eye(idx.size))
            ug = self.U[:, idx].T.copy()  # (n_g, T)
            vg = a_inv @ ug
            self.cop.append({
                "logdet": 2.0 * float(np.sum(np.log(np.diag(low)))),
                "A": a_inv,
                "U": ug,
                "V": vg,
                "qf": np.sum(ug * vg, axis=0),
                "su2": np.sum(ug * ug, axis=0),
            })
        return True

    def _gp_group_cache(self, gi: int, g: int, theta: CovParams, w_g: np.ndarray):
        d = self.gp_dists[g]
        c = theta.psill * np.exp(-d / theta.range_km)
        np.fill_diagonal(c, theta.psill + theta.nugget)
        low, _ = chol_with_jitter(c)
        a_inv = cho_solve((low, True), np.eye(d.shape[0]))
        vw = a_inv @ w_g
        return {
            "logdet": 2.0 * float(np.sum(np.log(np.diag(low)))),
            "A": a_inv,
            "Vw": vw,
            "qf": float(w_g @ vw),
            "arow": a_inv.sum(axis=0),
            "sA": float(a_inv.sum()),
        }

    def _rebuild_gp_layer(self) -> bool:
        self.gp = [[None] * len(self.gp_groups) for _ in range(3)]
        for gi in range(3):
            for g, idx in enumerate(self.gp_groups):
                try:
                    self.gp[gi][g] = self._gp_group_cache(gi, g, self.theta[gi], self.w[gi][idx])
                except np.linalg.LinAlgError:
                    return False
        return True

    # ------------------------------------------------------------------
    # totals
    # ------------------------------------------------------------------
    def _corr_of(self, c: dict) -> float:
        t = self.Y.shape[0]
        return float(-0.5 * t * c["logdet"] - 0.5 * np.sum(c["qf"]) + 0.5 * np.sum(c["su2"]))

    def _gp_ll_of(self, cache: dict, n: int) -> float:
        return -0.5 * (n * _LOG_2PI + cache["logdet"] + cache["qf"])

    @property
    def log_posterior_value(self) -> float:
        prior = sum(self.prior_parts.values())
        data = float(np.sum(self.station_ll)) + sum(self._corr_of(c) for c in self.cop)
        gp = sum(
            self._gp_ll_of(self.gp[gi][g], idx.size)
            for gi in range(3)
            for g, idx in enumerate(self.gp_groups)
        )
        return prior + data + gp

    def flat_state(self) -> np.ndarray:
        return self.x.copy()

    # ------------------------------------------------------------------
    # proposals
    # ------------------------------------------------------------------
    def propose(self, block_index: int, eps: np.ndarray) -> float:
        """Stage the block moved by innovation ``eps``; return the log
        acceptance ratio (posterior delta plus any proposal Jacobian)."""
        with np.errstate(all="ignore"):
            kind = self.blocks[block_index].kind
            tag = kind[0]
            if tag == "w":
                return self._propose_w(kind[1], kind[2], float(eps[0]))
            if tag == "beta0":
                return self._propose_surface(kind[1], "beta0", None, eps)
            if tag == "weights":
                return self._propose_surface(kind[1], "weights", kind[2], eps)
            if tag == "range":
                return self._propose_surface(kind[1], "range", kind[2], eps)
            if tag == "coeffs":
                return self._propose_coeffs(kind[1], eps)
            if tag == "theta":
                return self._propose_theta(kind[1], eps)
            if tag == "a0":
                return self._propose_a0(float(eps[0]))
            if tag == "shift":
                return self._propose_shift(kind[1], float(eps[0]))
            raise ValueError(f"unknown block kind {kind}")

    def commit(self) -> None:
        if self._staged is None:
            raise RuntimeError("no staged proposal to commit")
        apply, self._staged = self._staged, None
        apply()

    # -- single-station residual ---------------------------------------
    def _station_params(self, gi: int, i: int, new_lin: float):
        mu, sg, xi = self.mu_v[i], self.sg_v[i], self.xi_v[i]
        if gi == 0:
            mu = new_lin
        elif gi == 1:
            sg = np.exp(new_lin)
        else:
            xi = float(np.clip(new_lin, -0.5, 0.5))
        return mu, sg, xi

    def _propose_w(self, gi: int, i: int, eps: float) -> float:
        self._staged = None
        new_lin = self.lin[gi][i] + eps
        mu, sg, xi = self._station_params(gi, i, new_lin)

        yi = self.Y[:, i]
        ll = gev.logpdf_values(yi, mu, sg, xi)
        ll = np.where(self.miss[:, i], 0.0, ll)
        new_sll = float(np.sum(ll))
        if not np.isfinite(new_sll):
            return -np.inf
        delta = new_sll - self.station_ll[i]

        pos = self.pos_of_station.get(i)
        cop_pack = None
        if pos is not None:
            f = gev.cdf_values(self.Y_comp[:, pos], mu, sg, xi)
            u_new = ndtri(np.clip(f, U_CLIP, 1.0 - U_CLIP))
            g = self.cop_of_pos[pos]
            r = self.cop_row[pos]
            c = self.cop[g]
            du = u_new - c["U"][r]
            dqf = 2.0 * du * c["V"][r] + du * du * c["A"][r, r]
            dsu2 = u_new * u_new - c["U"][r] ** 2
            delta += float(np.sum(-0.5 * dqf + 0.5 * dsu2))
            cop_pack = (g, r, u_new, du, dqf, dsu2)

        h = self.gp_of_station[i]
        r2 = self.gp_row[i]
        cache = self.gp[gi][h]
        dqf_gp = 2.0 * eps * cache["Vw"][r2] + eps * eps * cache["A"][r2, r2]
        delta += -0.5 * dqf_gp

        def apply():
            self.w[gi][i] += eps
            self.x[self.layout.groups[f"w_{_GAMMAS[gi]}"][0] + i] += eps
            self.lin[gi][i] = new_lin
            if gi == 0:
                self.mu_v[i] = mu
            elif gi == 1:
                self.sg_v[i] = sg
            else:
                self.xi_v[i] = xi
            self.station_ll[i] = new_sll
            if cop_pack is not None:
                g, r, u_new, du, dqf, dsu2 = cop_pack
                c = self.cop[g]
                self.U[:, pos] = u_new
                c["U"][r] = u_new
                c["V"] += np.outer(c["A"][:, r], du)
                c["qf"] += dqf
                c["su2"] += dsu2
            cache["Vw"] += cache["A"][:, r2] * eps
            cache["qf"] += dqf_gp

        self._staged = apply
        return delta

    # -- surface blocks (intercept / weights / kernel range) ------------
    def _propose_surface(self, gi: int, what: str, j: int | None, eps: np.ndarray) -> float:
        self._staged = None
        g = _GAMMAS[gi]
        jac = 0.0
        new_basis_col = None
        if what == "beta0":
            new_lin = self.lin[gi] + eps[0]
            d_prior = {f"beta0_{g}": model._normal_lpdf(
                self.beta0[gi] + eps[0],
                model.PRIOR_SD_INTERCEPT if gi < 2 else model.PRIOR_SD_XI_INTERCEPT,
            )}
        elif what == "weights":
            new_w = self.weights[gi][j] + eps
            new_lin = self.lin[gi] + self.basis[gi][:, j] * (self.X @ eps)
            wmat = self.weights[gi].copy()
            wmat[j] = new_w
            d_prior = {f"weights_{g}": model._normal_lpdf(wmat, model.PRIOR_SD_WEIGHTS)}
        else:  # kernel range, multiplicative
            new_r = self.ranges[gi][j] * float(np.exp(eps[0]))
            jac = float(eps[0])
            new_basis_col = np.exp(-((self.knot_dists[:, j] / new_r) ** 2))
            contrib = self.X @ self.weights[gi][j]
            new_lin = self.lin[gi] + (new_basis_col - self.basis[gi][:, j]) * contrib
            rvec = self.ranges[gi].copy()
            rvec[j] = new_r
            d_prior = {f"ranges_{g}": model._half_normal_lpdf(rvec, model.PRIOR_SD_RANGE)}

        dp = sum(d_prior.values()) - sum(self.prior_parts[k] for k in d_prior)
        if not np.isfinite(dp):
            return -np.inf

        mu_v, sg_v, xi_v = self.mu_v, self.sg_v, self.xi_v
        if gi == 0:
            mu_v = new_lin
        elif gi == 1:
            sg_v = np.exp(new_lin)
        else:
            xi_v = np.clip(new_lin, -0.5, 0.5)

        pack = self._stage_data_layer(mu_v, sg_v, xi_v)
        if pack is None:
            return -np.inf
        d_data, new_sll, new_u, new_cop = pack

        def apply():
            sl = self.layout.group_slice(f"{'beta0' if what == 'beta0' else 'weights' if what == 'weights' else 'ranges'}_{g}")
            if what == "beta0":
                self.beta0[gi] += eps[0]
                self.x[sl] = self.beta0[gi]
            elif what == "weights":
                self.weights[gi][j] += eps
                self.x[sl] = self.weights[gi].ravel()
            else:
                self.ranges[gi][j] = self.ranges[gi][j] * float(np.exp(eps[0]))
                self.basis[gi][:, j] = new_basis_col
                self.x[sl] = self.ranges[gi]
            self.prior_parts.update(d_prior)
            self.lin[gi] = new_lin
            self.mu_v, self.sg_v, self.xi_v = mu_v, sg_v, xi_v
            self._apply_data_layer(new_sll, new_u, new_cop)

        self._staged = apply
        return dp + d_data + jac

    def _stage_data_layer(self, mu_v, sg_v, xi_v):
        """Recompute station log likelihoods, normal scores and per-group
        copula aggregates for a fully changed surface; None when the state
        leaves the support."""
        new_sll = self._station_loglik(mu_v, sg_v, xi_v)
        total = float(np.sum(new_sll))
        if not np.isfinite(total):
            return None
        new_u = self._normal_scores(mu_v, sg_v, xi_v)
        new_cop = []
        d_data = total - float(np.sum(self.station_ll))
        for idx, c in zip(self.cop_groups, self.cop):
            ug = new_u[:, idx].T.copy()
            vg = c["A"] @ ug
            qf = np.sum(ug * vg, axis=0)
            su2 = np.sum(ug * ug, axis=0)
            d_data += float(-0.5 * (np.sum(qf) - np.sum(c["qf"])) + 0.5 * (np.sum(su2) - np.sum(c["su2"])))
            new_cop.append((ug, vg, qf, su2))
        return d_data, new_sll, new_u, new_cop

    def _apply_data_layer(self, new_sll, new_u, new_cop):
        self.station_ll = new_sll
        self.U = new_u
        for c, (ug, vg, qf, su2) in zip(self.cop, new_cop):
            c["U"], c["V"], c["qf"], c["su2"] = ug, vg, qf, su2

    # -- joint basis coefficients (weights and log kernel ranges) --------
    def _propose_coeffs(self, gi: int, eps: np.ndarray) -> float:
        self._staged = None
        g = _GAMMAS[gi]
        k, p = self.layout.k, self.layout.p
        new_w = self.weights[gi] + eps[: k * p].reshape(k, p)
        new_r = self.ranges[gi] * np.exp(eps[k * p :])
        jac = float(np.sum(eps[k * p :]))
        new_basis = np.exp(-((self.knot_dists / new_r) ** 2))
        new_lin = self.beta0[gi] + np.sum(self.X * (new_basis @ new_w), axis=1) + self.w[gi]

        d_prior = {
            f"weights_{g}": model._normal_lpdf(new_w, model.PRIOR_SD_WEIGHTS),
            f"ranges_{g}": model._half_normal_lpdf(new_r, model.PRIOR_SD_RANGE),
        }
        dp = sum(d_prior.values()) - sum(self.prior_parts[key] for key in d_prior)
        if not np.isfinite(dp):
            return -np.inf

        mu_v, sg_v, xi_v = self.mu_v, self.sg_v, self.xi_v
        if gi == 0:
            mu_v = new_lin
        elif gi == 1:
            sg_v = np.exp(new_lin)
        else:
            xi_v = np.clip(new_lin, -0.5, 0.5)
        pack = self._stage_data_layer(mu_v, sg_v, xi_v)
        if pack is None:
            return -np.inf
        d_data, new_sll, new_u, new_cop = pack

        def apply():
            self.weights[gi] = new_w
            self.ranges[gi] = new_r
            self.basis[gi] = new_basis
            self.x[self.layout.group_slice(f"weights_{g}")] = new_w.ravel()
            self.x[self.layout.group_slice(f"ranges_{g}")] = new_r
            self.prior_parts.update(d_prior)
            self.lin[gi] = new_lin
            self.mu_v, self.sg_v, self.xi_v = mu_v, sg_v, xi_v
            self._apply_data_layer(new_sll, new_u, new_cop)

        self._staged = apply
        return dp + d_data + jac

    # -- GP covariance parameters ---------------------------------------
    def _propose_theta(self, gi: int, eps: np.ndarray) -> float:
        self._staged = None
        g = _GAMMAS[gi]
        old = self.theta[gi]
        new = CovParams(
            psill=old.psill * float(np.exp(eps[0])),
            range_km=old.range_km * float(np.exp(eps[1])),
            nugget=old.nugget * float(np.exp(eps[2])),
        )
        sd_var = model.PRIOR_SD_XI_VARIANCE if g == "xi" else model.PRIOR_SD_VARIANCE
        new_prior = (
            model._half_normal_lpdf(new.psill, sd_var)
            + model._half_normal_lpdf(new.nugget, sd_var)
            + model._half_normal_lpdf(new.range_km, model.PRIOR_SD_RANGE)
        )
        delta = new_prior - self.prior_parts[f"theta_{g}"] + float(np.sum(eps))

        caches = []
        for h, idx in enumerate(self.gp_groups):
            try:
                cache = self._gp_group_cache(gi, h, new, self.w[gi][idx])
            except np.linalg.LinAlgError:
                return -np.inf
            oldc = self.gp[gi][h]
            delta += -0.5 * ((cache["logdet"] - oldc["logdet"]) + (cache["qf"] - oldc["qf"]))
            caches.append(cache)
        if not np.isfinite(delta):
            return -np.inf

        def apply():
            self.theta[gi] = new
            self.x[self.layout.group_slice(f"theta_{g}")] = (new.psill, new.range_km, new.nugget)
            self.prior_parts[f"theta_{g}"] = new_prior
            self.gp[gi] = caches

        self._staged = apply
        return delta

    # -- copula range -----------------------------------------------------
    def _propose_a0(self, eps: float) -> float:
        self._staged = None
        new_a0 = self.a0 * float(np.exp(eps))
        new_prior = model._half_normal_lpdf(new_a0, model.PRIOR_SD_RANGE)
        delta = new_prior - self.prior_parts["a0"] + eps
        t = self.Y.shape[0]
        packs = []
        for idx, d, c in zip(self.cop_groups, self.cop_dists, self.cop):
            sig = np.exp(-d / new_a0)
            try:
                low, _ = chol_with_jitter(sig)
            except np.linalg.LinAlgError:
                return -np.inf
            a_inv = cho_solve((low, True), np.eye(idx.size))
            logdet = 2.0 * float(np.sum(np.log(np.diag(low))))
            vg = a_inv @ c["U"]
            qf = np.sum(c["U"] * vg, axis=0)
            delta += -0.5 * t * (logdet - c["logdet"]) - 0.5 * float(np.sum(qf) - np.sum(c["qf"]))
            packs.append((logdet, a_inv, vg, qf))
        if not np.isfinite(delta):
            return -np.inf

        def apply():
            self.a0 = new_a0
            self.x[self.layout.group_slice("a0")] = new_a0
            self.prior_parts["a0"] = new_prior
            for c, (logdet, a_inv, vg, qf) in zip(self.cop, packs):
                c["logdet"], c["A"], c["V"], c["qf"] = logdet, a_inv, vg, qf

        self._staged = apply
        return delta

    # -- intercept/residual interweaving ---------------------------------
    def _propose_shift(self, gi: int, eps: float) -> float:
        """Move beta0 by eps and every residual by -eps: the surfaces (and
        hence the data layer) are unchanged; only the GP quadratic forms and
        the intercept prior move."""
        self._staged = None
        g = _GAMMAS[gi]
        sd = model.PRIOR_SD_INTERCEPT if gi < 2 else model.PRIOR_SD_XI_INTERCEPT
        new_prior = model._normal_lpdf(self.beta0[gi] + eps, sd)
        delta = new_prior - self.prior_parts[f"beta0_{g}"]
        dqfs = []
        for h in range(len(self.gp_groups)):
            c = self.gp[gi][h]
            svw = float(np.sum(c["Vw"]))
            dqf = -2.0 * eps * svw + eps * eps * c["sA"]
            delta += -0.5 * dqf
            dqfs.append(dqf)

        def apply():
            self.beta0[gi] += eps
            self.x[self.layout.group_slice(f"beta0_{g}")] = self.beta0[gi]
            self.prior_parts[f"beta0_{g}"] = new_prior
            self.w[gi] -= eps
            self.x[self.layout.group_slice(f"w_{g}")] = self.w[gi]
            for h, dqf in enumerate(dqfs):
                c = self.gp[gi][h]
                c["Vw"] -= eps * c["arow"]
                c["qf"] += dqf

        self._staged = apply
        return delta


def build_target(
    obs: ObservationSet,
    knots,
    n_g: int,
    seed,
) -> PosteriorTarget:
    """Assemble the sampler target for an observation set: fixed random
    partitions for the GP layer (all stations) and the copula layer
    (complete stations), plus the initialization center."""
    rng = np.random.default_rng(seed)
    part_all = model.make_partition(obs.n_stations, min(n_g, obs.n_stations), rng)
    n_comp = int(np.sum(obs.complete_mask))
    if n_comp == 0:
        raise ValueError("no complete stations; the copula layer needs at least one")
    part_comp = model.make_partition(n_comp, min(n_g, n_comp), rng)
    target = PosteriorTarget(obs, part_all, part_comp, knots)
    target.init_center = target.compute_init_center()
    return target
