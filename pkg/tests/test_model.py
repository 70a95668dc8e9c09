import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from spatgev import gev as gev_mod
from spatgev import model
from spatgev.copula import U_CLIP
from spatgev.gev import GevParams
from spatgev.model import (
    GroupPartition,
    ModelState,
    ObservationSet,
    latent_gp_loglik_grouped,
    log_posterior,
    log_prior,
    make_partition,
)
from spatgev.simulate import simulate_observations
from spatgev.spatial import CovParams, RegressionField, exp_cov_matrix
from spatgev.target import build_target


class TestMakePartition:
    def test_even_split(self):
        part = make_partition(60, 30, seed=0)
        assert part.n_groups == 2
        sizes = [len(g) for g in part.groups()]
        assert sizes == [30, 30]

    def test_paper_scale_balance(self):
        part = make_partition(2618, 30, seed=0)
        assert part.n_groups == 88
        sizes = sorted(len(g) for g in part.groups())
        assert set(sizes) == {29, 30}
        assert sizes.count(29) == 22

    def test_single_group(self):
        part = make_partition(17, 17, seed=0)
        assert part.n_groups == 1
        assert len(part.groups()[0]) == 17

    def test_every_station_exactly_once(self):
        part = make_partition(101, 7, seed=3)
        all_idx = np.concatenate(part.groups())
        assert np.array_equal(np.sort(all_idx), np.arange(101))

    def test_deterministic_given_seed(self):
        a = make_partition(50, 8, seed=5)
        b = make_partition(50, 8, seed=5)
        assert np.array_equal(a.group_of_station, b.group_of_station)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            make_partition(10, 0, seed=0)
        with pytest.raises(ValueError):
            make_partition(10, 11, seed=0)


def _sites(rng, n):
    return np.column_stack([rng.uniform(-115, -110, n), rng.uniform(38, 42, n)])


class TestLatentGpLoglik:
    def test_single_group_matches_scipy(self):
        rng = np.random.default_rng(0)
        sites = _sites(rng, 3)
        w = rng.normal(0, 1, 3)
        theta = CovParams(1.5, 200.0, 0.3)
        part = make_partition(3, 3, seed=0)
        ours = latent_gp_loglik_grouped(w, theta, sites, part)
        cov = exp_cov_matrix(sites, theta)
        ref = multivariate_normal(mean=np.zeros(3), cov=cov).logpdf(w)
        assert ours == pytest.approx(ref, abs=1e-10)

    def test_zero_residuals_leave_only_normalizer(self):
        rng = np.random.default_rng(1)
        sites = _sites(rng, 8)
        theta = CovParams(1.0, 150.0, 0.2)
        part = make_partition(8, 4, seed=1)
        ours = latent_gp_loglik_grouped(np.zeros(8), theta, sites, part)
        expected = 0.0
        for idx in part.groups():
            cov = exp_cov_matrix(sites[idx], theta)
            expected += -0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]
        assert ours == pytest.approx(expected, abs=1e-10)

    def test_diagonal_limit(self):
        rng = np.random.default_rng(2)
        sites = _sites(rng, 6)
        w = rng.normal(0, 1, 6)
        theta = CovParams(0.5, 1e-3, 3.0)  # tiny range: groups go diagonal
        part = make_partition(6, 3, seed=2)
        ours = latent_gp_loglik_grouped(w, theta, sites, part)
        indep = float(np.sum(norm.logpdf(w, scale=np.sqrt(3.5))))
        assert ours == pytest.approx(indep, rel=1e-8)


def _tiny_state(m, k=1, p=1, seed=0, ranges_at=1e-3):
    rng = np.random.default_rng(seed)
    knots = np.array([[-112.0, 40.0]] * k)

    def f(b0):
        return RegressionField(b0, knots, np.full(k, ranges_at), np.zeros((k, p)))

    return ModelState(
        field_mu=f(0.0), field_sigma=f(0.0), field_xi=f(0.0),
        w_mu=np.zeros(m), w_sigma=np.zeros(m), w_xi=np.zeros(m),
        theta_mu=CovParams(ranges_at, ranges_at, 0.0),
        theta_sigma=CovParams(ranges_at, ranges_at, 0.0),
        theta_xi=CovParams(ranges_at, ranges_at, 0.0),
        a0=ranges_at,
    )


class TestLogPrior:
    def test_center_value_scripted(self):
        eps = 1e-9
        state = _tiny_state(4, ranges_at=eps)
        val = log_prior(state)
        # every term at (essentially) zero: normals at their centers,
        # half-normals contribute an extra log 2 each
        n_weights = 3  # one (k=1, p=1) weight matrix per parameter
        expected = (
            2 * norm.logpdf(0, scale=10)          # mu/sigma intercepts
            + norm.logpdf(0, scale=1)             # xi intercept
            + n_weights * norm.logpdf(0, scale=1)
            + 3 * (np.log(2) + norm.logpdf(eps, scale=1000))   # kernel ranges
            + 2 * 2 * (np.log(2) + norm.logpdf(eps, scale=1))  # mu/sigma psill+nugget
            + 2 * (np.log(2) + norm.logpdf(eps, scale=0.1))    # xi psill+nugget
            + 3 * (np.log(2) + norm.logpdf(eps, scale=1000))   # GP ranges
            + (np.log(2) + norm.logpdf(eps, scale=1000))       # copula range
        )
        assert val == pytest.approx(expected, abs=1e-8)

    def test_intercept_contribution(self):
        base = _tiny_state(4)
        moved = _tiny_state(4)
        moved.field_mu.intercept = 10.0
        delta = log_prior(moved) - log_prior(base)
        assert delta == pytest.approx(norm.logpdf(10, scale=10) - norm.logpdf(0, scale=10), abs=1e-10)
        assert norm.logpdf(10, scale=10) == pytest.approx(-3.7215, abs=1e-4)

    def test_negative_variance_is_minus_inf(self):
        state = _tiny_state(4)
        state.theta_mu = CovParams(-0.5, 100.0, 0.1)
        assert log_prior(state) == -np.inf

    def test_nonpositive_ranges_are_minus_inf(self):
        state = _tiny_state(4)
        state.a0 = 0.0
        assert log_prior(state) == -np.inf


def scripted_log_posterior(state, obs, part_all, part_comp):
    """Fully independent end-to-end evaluation with scipy primitives."""
    from scipy.stats import genextreme

    knots = state.field_mu.knots
    from spatgev.spatial import distance_matrix

    d_knots = distance_matrix(obs.sites, knots)
    lins = []
    for f, w in zip(state.fields(), state.residuals()):
        eta = np.exp(-((d_knots / f.kernel_ranges) ** 2))
        lins.append(f.intercept + np.sum(obs.covariates * (eta @ f.weights), axis=1) + w)
    mu, sg, xi = lins[0], np.exp(lins[1]), np.clip(lins[2], -0.5, 0.5)

    total = log_prior(state)
    for w, th in zip(state.residuals(), state.thetas()):
        for idx in part_all.groups():
            d = distance_matrix(obs.sites[idx])
            cov = th.psill * np.exp(-d / th.range_km)
            np.fill_diagonal(cov, th.psill + th.nugget)
            total += multivariate_normal(mean=np.zeros(len(idx)), cov=cov).logpdf(w[idx])

    comp = obs.complete_indices()
    inc = np.flatnonzero(~obs.complete_mask)
    for i in inc:
        y = obs.maxima[:, i]
        y = y[np.isfinite(y)]
        total += float(np.sum(genextreme.logpdf(y, c=-xi[i], loc=mu[i], scale=sg[i])))

    for idx in part_comp.groups():
        st_idx = comp[idx]
        d = distance_matrix(obs.sites[st_idx])
        sig = np.exp(-d / state.a0)
        mvn = multivariate_normal(mean=np.zeros(len(idx)), cov=sig)
        for t in range(obs.n_years):
            y = obs.maxima[t, st_idx]
            total += float(np.sum(genextreme.logpdf(y, c=-xi[st_idx], loc=mu[st_idx], scale=sg[st_idx])))
            u = norm.ppf(
                np.clip(genextreme.cdf(y, c=-xi[st_idx], loc=mu[st_idx], scale=sg[st_idx]), U_CLIP, 1 - U_CLIP)
            )
            total += float(mvn.logpdf(u) - np.sum(norm.logpdf(u)))
    return total


class TestLogPosterior:
    def _instance(self, m=6, years=5, seed=9, n_g=3):
        obs, truth = simulate_observations(
            m=m, n_years=years, k=2, seed=seed, incomplete_fraction=0.34,
            missing_year_fraction=0.3,
        )
        part_all = make_partition(m, n_g, seed=1)
        n_comp = int(obs.complete_mask.sum())
        part_comp = make_partition(n_comp, max(1, n_comp // 2), seed=2)
        return obs, truth, part_all, part_comp

    def test_small_instance_matches_scripted_oracle(self):
        obs, truth, part_all, part_comp = self._instance()
        ours = log_posterior(truth.state, obs, part_all, part_comp)
        ref = scripted_log_posterior(truth.state, obs, part_all, part_comp)
        assert ours == pytest.approx(ref, rel=1e-8)

    def test_decouples_with_tiny_a0_and_singletons(self):
        obs, truth, part_all, _ = self._instance()
        n_comp = int(obs.complete_mask.sum())
        singles = make_partition(n_comp, 1, seed=0)
        state = truth.state
        state_small_a0 = ModelState(
            **{**state.__dict__, "a0": 1e-9}
        )
        val = log_posterior(state_small_a0, obs, part_all, singles)
        expected = log_prior(state_small_a0)
        for w, th in zip(state.residuals(), state.thetas()):
            expected += latent_gp_loglik_grouped(w, th, obs.sites, part_all)
        mu, sg, xi = model.gev_surfaces(state_small_a0, obs)
        ll = gev_mod.logpdf_values(obs.maxima, mu, sg, xi)
        expected += float(np.nansum(np.where(np.isnan(obs.maxima), np.nan, ll)))
        assert val == pytest.approx(expected, rel=1e-10)

    def test_local_perturbation_audit(self):
        obs, truth, part_all, part_comp = self._instance(m=8, years=6, n_g=4)
        tgt = build_target(obs, truth.knots, n_g=4, seed=3)
        base_x = tgt.layout.pack(truth.state)
        base = tgt.load_state(base_x)
        i = 2
        delta = tgt.propose(next(b for b, s in enumerate(tgt.blocks) if s.kind == ("w", 0, i)), np.array([0.3]))
        moved = truth.state
        moved.w_mu[i] += 0.3
        ref_delta = log_posterior(moved, obs, tgt.part_all, tgt.part_comp) - tgt.load_state(base_x)
        moved.w_mu[i] -= 0.3
        moved.w_mu[i] += 0.3
        ref = log_posterior(moved, obs, tgt.part_all, tgt.part_comp)
        moved.w_mu[i] -= 0.3
        assert delta == pytest.approx(ref - base, rel=1e-8, abs=1e-8)

    def test_swap_within_group_invariance(self):
        obs, truth, part_all, part_comp = self._instance(m=8, years=6, n_g=4)
        base = log_posterior(truth.state, obs, part_all, part_comp)
        # find two stations sharing a GP group, both complete or both not,
        # sharing a copula group when complete
        comp = obs.complete_indices()
        pair = None
        for g in part_all.groups():
            for a in g:
                for b in g:
                    if a >= b:
                        continue
                    if obs.complete_mask[a] != obs.complete_mask[b]:
                        continue
                    if obs.complete_mask[a]:
                        pa = int(np.where(comp == a)[0][0])
                        pb = int(np.where(comp == b)[0][0])
                        if part_comp.group_of_station[pa] != part_comp.group_of_station[pb]:
                            continue
                        pair = (a, b)
                    else:
                        pair = (a, b)
        if pair is None:
            pytest.skip("fixture produced no swappable pair")
        a, b = pair
        perm = np.arange(obs.n_stations)
        perm[[a, b]] = [b, a]
        obs2 = ObservationSet(
            station_ids=[obs.station_ids[i] for i in perm],
            sites=obs.sites[perm],
            covariates=obs.covariates[perm],
            maxima=obs.maxima[:, perm],
            years=obs.years,
            complete_mask=obs.complete_mask[perm],
        )
        st = truth.state
        state2 = ModelState(
            field_mu=st.field_mu, field_sigma=st.field_sigma, field_xi=st.field_xi,
            w_mu=st.w_mu[perm], w_sigma=st.w_sigma[perm], w_xi=st.w_xi[perm],
            theta_mu=st.theta_mu, theta_sigma=st.theta_sigma, theta_xi=st.theta_xi,
            a0=st.a0,
        )
        swapped = log_posterior(state2, obs2, part_all, part_comp)
        assert swapped == pytest.approx(base, rel=1e-10)

    def test_replicated_years_double_data_layer(self):
        obs, truth, part_all, part_comp = self._instance()
        prior_and_gp = log_prior(truth.state)
        for w, th in zip(truth.state.residuals(), truth.state.thetas()):
            prior_and_gp += latent_gp_loglik_grouped(w, th, obs.sites, part_all)
        single = log_posterior(truth.state, obs, part_all, part_comp)
        doubled_obs = ObservationSet(
            station_ids=obs.station_ids,
            sites=obs.sites,
            covariates=obs.covariates,
            maxima=np.vstack([obs.maxima, obs.maxima]),
            years=np.concatenate([obs.years, obs.years + 100]),
            complete_mask=obs.complete_mask,
        )
        double = log_posterior(truth.state, doubled_obs, part_all, part_comp)
        assert double - prior_and_gp == pytest.approx(2 * (single - prior_and_gp), rel=1e-12)

    def test_composite_equals_full_at_single_group(self):
        obs, truth, *_ = self._instance(m=12, years=8)
        part_all = make_partition(12, 12, seed=0)
        n_comp = int(obs.complete_mask.sum())
        part_comp = make_partition(n_comp, n_comp, seed=0)
        ours = log_posterior(truth.state, obs, part_all, part_comp)
        ref = scripted_log_posterior(truth.state, obs, part_all, part_comp)
        assert ours == pytest.approx(ref, rel=1e-8)

    def test_finite_on_random_inits(self):
        obs, truth, *_ = self._instance(m=10, years=6)
        tgt = build_target(obs, truth.knots, n_g=5, seed=4)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = tgt.init_state(rng, jitter=0.3)
            assert np.isfinite(tgt.load_state(x)), f"non-finite posterior at init seed {seed}"
