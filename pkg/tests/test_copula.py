import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from spatgev import gev as gev_mod
from spatgev.copula import (
    asymptotic_independence_test,
    copula_loglik,
    copula_loglik_grouped,
)
from spatgev.gev import GevParams, gev_cdf, gev_logpdf
from spatgev.model import make_partition


def scripted_copula_loglik(y, params, sigma):
    """Independent oracle: textbook Gaussian copula density via scipy."""
    y = np.asarray(y, float)
    marg = sum(gev_logpdf(yi, p) for yi, p in zip(y, params))
    u = norm.ppf([np.clip(gev_cdf(yi, p), 1e-12, 1 - 1e-12) for yi, p in zip(y, params)])
    return (
        marg
        + multivariate_normal(mean=np.zeros(len(y)), cov=sigma).logpdf(u)
        - np.sum(norm.logpdf(u))
    )


class TestCopulaLoglik:
    def test_single_station_reduces_to_marginal(self):
        p = [GevParams(3.0, 2.0, 0.15)]
        assert copula_loglik([4.0], p, np.eye(1)) == pytest.approx(
            gev_logpdf(4.0, p[0]), abs=1e-12
        )

    def test_identity_dependence_is_independence(self):
        rng = np.random.default_rng(0)
        params = [GevParams(rng.uniform(5, 15), rng.uniform(1, 3), 0.1) for _ in range(6)]
        y = [p.mu + 0.5 for p in params]
        expected = sum(gev_logpdf(yi, p) for yi, p in zip(y, params))
        assert copula_loglik(y, params, np.eye(6)) == pytest.approx(expected, abs=1e-10)

    def test_bivariate_correction_at_origin(self):
        # u1 = u2 = 0 makes the correction -0.5*log(1 - rho^2) = log(2/sqrt(3))
        params = [GevParams(0, 1, 0.1), GevParams(0, 1, 0.1)]
        y_med = gev_mod.gev_quantile(0.5, params[0])
        sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
        indep = copula_loglik([y_med, y_med], params, np.eye(2))
        dep = copula_loglik([y_med, y_med], params, sigma)
        assert dep - indep == pytest.approx(np.log(2 / np.sqrt(3)), abs=1e-6)
        assert dep - indep == pytest.approx(0.143841, abs=1e-6)

    def test_outside_support_is_minus_inf(self):
        params = [GevParams(0, 1, 0.5), GevParams(0, 1, 0.5)]
        assert copula_loglik([-5.0, 1.0], params, np.eye(2)) == -np.inf

    def test_non_pd_dependence_raises(self):
        params = [GevParams(0, 1, 0.1), GevParams(0, 1, 0.1)]
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(np.linalg.LinAlgError):
            copula_loglik([0.5, 0.5], params, bad)

    def test_matches_scripted_oracle(self):
        rng = np.random.default_rng(1)
        params = [GevParams(rng.uniform(5, 15), rng.uniform(1, 3), rng.uniform(-0.2, 0.3)) for _ in range(4)]
        y = [p.mu + rng.uniform(0, 3) for p in params]
        d = np.abs(np.subtract.outer(np.arange(4.0), np.arange(4.0)))
        sigma = np.exp(-d / 2.5)
        assert copula_loglik(y, params, sigma) == pytest.approx(
            scripted_copula_loglik(y, params, sigma), abs=1e-8
        )

    @given(st.permutations(range(5)))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariance(self, perm):
        rng = np.random.default_rng(2)
        params = [GevParams(10 + i, 2.0, 0.1) for i in range(5)]
        y = np.array([11.0, 12.5, 13.0, 12.0, 15.5])
        d = np.abs(np.subtract.outer(np.arange(5.0), np.arange(5.0)))
        sigma = np.exp(-d / 3.0)
        perm = list(perm)
        base = copula_loglik(y, params, sigma)
        permuted = copula_loglik(y[perm], [params[i] for i in perm], sigma[np.ix_(perm, perm)])
        assert permuted == pytest.approx(base, rel=1e-10, abs=1e-10)

    def test_integrates_to_one_bivariate(self):
        params = [GevParams(0, 1, 0.1), GevParams(0, 1, 0.1)]
        lo = gev_mod.gev_quantile(1e-9, params[0])
        hi = gev_mod.gev_quantile(1 - 1e-9, params[0])
        x, w = np.polynomial.legendre.leggauss(160)
        ys = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        ws = 0.5 * (hi - lo) * w
        sigma = np.array([[1.0, 0.5], [0.5, 1.0]])
        total = 0.0
        for i in range(ys.size):
            row = np.array([copula_loglik([ys[i], yj], params, sigma) for yj in ys])
            total += ws[i] * np.sum(ws * np.exp(row))
        assert total == pytest.approx(1.0, abs=1e-3)


class TestCopulaGrouped:
    def _network(self, m=10, years=6, seed=3):
        rng = np.random.default_rng(seed)
        sites = np.column_stack([rng.uniform(-115, -110, m), rng.uniform(38, 42, m)])
        params = [GevParams(rng.uniform(8, 14), rng.uniform(1.5, 3), 0.1) for _ in range(m)]
        y = np.column_stack(
            [gev_mod.quantile_values(rng.uniform(0.02, 0.98, years), p.mu, p.sigma, p.xi) for p in params]
        )
        return sites, params, y

    def test_single_group_equals_ungrouped(self):
        sites, params, y = self._network()
        part = make_partition(10, 10, seed=0)
        a0 = 200.0
        grouped = copula_loglik_grouped(y, params, sites, part, a0)
        from spatgev.spatial import dependogram_matrix

        sigma = dependogram_matrix(sites, a0)
        direct = sum(copula_loglik(y[t], params, sigma) for t in range(y.shape[0]))
        assert grouped == pytest.approx(direct, rel=1e-10)

    def test_singleton_groups_give_independence_likelihood(self):
        sites, params, y = self._network()
        part = make_partition(10, 1, seed=0)
        grouped = copula_loglik_grouped(y, params, sites, part, 200.0)
        indep = sum(
            gev_logpdf(y[t, i], params[i]) for t in range(y.shape[0]) for i in range(10)
        )
        assert grouped == pytest.approx(indep, rel=1e-12)

    def test_grouping_changes_value_but_converges_as_a0_shrinks(self):
        sites, params, y = self._network()
        one = make_partition(10, 10, seed=0)
        two = make_partition(10, 5, seed=0)
        v1 = copula_loglik_grouped(y, params, sites, one, 200.0)
        v2 = copula_loglik_grouped(y, params, sites, two, 200.0)
        assert np.isfinite(v1) and np.isfinite(v2) and v1 != v2
        gaps = [
            abs(
                copula_loglik_grouped(y, params, sites, one, a0)
                - copula_loglik_grouped(y, params, sites, two, a0)
            )
            for a0 in (200.0, 20.0, 2.0)
        ]
        assert gaps[2] < gaps[1] < gaps[0]

    def test_missing_data_rejected(self):
        sites, params, y = self._network()
        y[0, 0] = np.nan
        with pytest.raises(ValueError):
            copula_loglik_grouped(y, params, sites, make_partition(10, 5, 0), 200.0)


class TestAsymptoticIndependence:
    def test_comonotone_retains_dependence(self):
        x = np.linspace(0, 1, 150)
        res = asymptotic_independence_test(x, x)
        assert res.chi_hat == 1.0
        assert not res.reject_dependence

    def test_independent_chi_near_benchmark(self):
        hits = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            res = asymptotic_independence_test(rng.normal(size=10_000), rng.normal(size=10_000))
            if 0.02 < res.chi_hat < 0.10:
                hits += 1
        assert hits >= 38  # >= 95% of runs

    def test_independent_pairs_rarely_flagged(self):
        flagged = 0
        for seed in range(300):
            rng = np.random.default_rng(seed + 1000)
            res = asymptotic_independence_test(rng.normal(size=120), rng.normal(size=120))
            flagged += not res.reject_dependence
        assert flagged / 300 < 0.01

    def test_degenerate_input(self):
        with pytest.raises(ValueError):
            asymptotic_independence_test(np.ones(100), np.ones(100))

    def test_too_short(self):
        with pytest.raises(ValueError):
            asymptotic_independence_test(np.arange(20.0), np.arange(20.0))
