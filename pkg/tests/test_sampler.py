import numpy as np
import pytest
from scipy.stats import kstest, norm

from spatgev.archive import PosteriorArchive
from spatgev.sampler import ChainConfig, effective_sample_size, rhat, run_chains, run_single_chain
from spatgev.target import BlockSpec, InitializationError


class StubGaussianTarget:
    """Independent normal target exercising the block-target protocol the
    generic way: full log-density differences, no caching."""

    def __init__(self, mean, sd, start=None):
        self.mean = np.asarray(mean, dtype=float)
        self.sd = np.asarray(sd, dtype=float)
        self.dim = self.mean.size
        self.start = np.zeros(self.dim) if start is None else np.asarray(start, float)
        self.blocks = [
            BlockSpec(f"x[{i}]", 1, 0.44, 1.0, ("x", i)) for i in range(self.dim)
        ]
        self.param_names = [f"x[{i}]" for i in range(self.dim)]
        self.param_groups = {"x": (0, self.dim)}

    def logpdf(self, x):
        return float(np.sum(norm.logpdf(x, loc=self.mean, scale=self.sd)))

    def init_state(self, rng, jitter=0.0):
        return self.start + jitter * rng.standard_normal(self.dim)

    def load_state(self, x):
        self.x = np.asarray(x, dtype=float).copy()
        return self.logpdf(self.x)

    def propose(self, block_index, eps):
        i = self.blocks[block_index].kind[1]
        self._staged = (i, self.x[i] + float(eps[0]))
        old = norm.logpdf(self.x[i], self.mean[i], self.sd[i])
        new = norm.logpdf(self._staged[1], self.mean[i], self.sd[i])
        return float(new - old)

    def commit(self):
        i, v = self._staged
        self.x[i] = v

    def flat_state(self):
        return self.x.copy()

    @property
    def log_posterior_value(self):
        return self.logpdf(self.x)


class NeverFiniteTarget(StubGaussianTarget):
    def load_state(self, x):
        super().load_state(x)
        return -np.inf


class TestRunChains:
    def test_recovers_standard_normal_moments(self):
        target = StubGaussianTarget([0.0, 0.0], [1.0, 1.0])
        cfg = ChainConfig(n_chains=1, n_iterations=21_000, n_warmup=1000, seed=3, refresh_every=0)
        arch = run_chains(target, cfg)
        x = arch.draws[0]
        assert np.max(np.abs(x.mean(axis=0))) < 0.05
        emp = np.cov(x.T)
        assert np.max(np.abs(emp - np.eye(2))) < 0.1

    def test_bookkeeping_single_kept_draw(self):
        target = StubGaussianTarget([0.0], [1.0])
        cfg = ChainConfig(n_chains=3, n_iterations=51, n_warmup=50, seed=0, refresh_every=0)
        arch = run_chains(target, cfg)
        assert arch.draws.shape == (3, 1, 1)

    def test_deterministic_and_parallel_identical(self):
        target = StubGaussianTarget([1.0, -1.0], [2.0, 0.5])
        cfg1 = ChainConfig(n_chains=2, n_iterations=400, n_warmup=100, seed=9, n_jobs=1, refresh_every=0)
        cfg2 = ChainConfig(n_chains=2, n_iterations=400, n_warmup=100, seed=9, n_jobs=2, refresh_every=0)
        a = run_chains(target, cfg1)
        b = run_chains(target, cfg2)
        assert np.array_equal(a.draws, b.draws)
        assert np.array_equal(a.logpost, b.logpost)

    def test_scales_frozen_after_warmup(self):
        target = StubGaussianTarget([0.0, 0.0], [1.0, 3.0])
        base = dict(n_chains=1, n_warmup=600, seed=5, refresh_every=0)
        short = run_chains(target, ChainConfig(n_iterations=601, **base))
        long = run_chains(target, ChainConfig(n_iterations=2600, **base))
        for name in short.final_scales:
            assert short.final_scales[name] == long.final_scales[name]

    def test_aborts_when_never_finite(self):
        target = NeverFiniteTarget([0.0], [1.0])
        cfg = ChainConfig(n_chains=1, n_iterations=20, n_warmup=10, seed=0)
        with pytest.raises(InitializationError):
            run_chains(target, cfg)

    def test_stub_target_ks_distance(self):
        target = StubGaussianTarget([0.0, 0.0], [1.0, 1.0])
        cfg = ChainConfig(n_chains=1, n_iterations=51_000, n_warmup=1000, seed=17, refresh_every=0)
        arch = run_chains(target, cfg)
        for i in range(2):
            stat = kstest(arch.draws[0, :, i], "norm").statistic
            assert stat < 0.02


class TestRhat:
    def test_same_distribution_near_one(self):
        rng = np.random.default_rng(0)
        draws = rng.normal(size=(2, 20_000))
        assert rhat(draws) == pytest.approx(1.0, abs=0.01)

    def test_separated_chains_blow_up(self):
        rng = np.random.default_rng(1)
        draws = np.stack([rng.normal(0, 1, 2000), rng.normal(10, 1, 2000)])
        assert rhat(draws) > 1.5

    def test_constant_chains_sentinel(self):
        assert np.isnan(rhat(np.ones((2, 100))))

    def test_identical_chains_never_flag(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=1000)
        r = rhat(np.stack([base, base]))
        assert np.isnan(r) or r < 1.1

    def test_preconditions(self):
        with pytest.raises(ValueError):
            rhat(np.zeros((1, 100)))
        with pytest.raises(ValueError):
            rhat(np.zeros((2, 5)))


class TestEffectiveSampleSize:
    def test_iid_close_to_n(self):
        rng = np.random.default_rng(3)
        n = 20_000
        ess = effective_sample_size(rng.normal(size=(1, n)))
        assert abs(ess - n) / n < 0.2

    def test_ar1_matches_analytic(self):
        rng = np.random.default_rng(4)
        phi, n = 0.9, 200_000
        x = np.empty(n)
        x[0] = rng.normal()
        eps = rng.normal(size=n)
        for t in range(1, n):
            x[t] = phi * x[t - 1] + eps[t]
        expected = n * (1 - phi) / (1 + phi)
        ess = effective_sample_size(x[None, :])
        assert abs(ess - expected) / expected < 0.3

    def test_constant_sentinel(self):
        assert np.isnan(effective_sample_size(np.ones((1, 500))))

    def test_precondition(self):
        with pytest.raises(ValueError):
            effective_sample_size(np.zeros((1, 50)))


class TestArchive:
    def _make(self, seed=0):
        rng = np.random.default_rng(seed)
        return PosteriorArchive(
            param_names=["a", "b[0]", "b[1]"],
            param_groups={"a": (0, 1), "b": (1, 3)},
            draws=rng.normal(size=(2, 50, 3)),
            logpost=rng.normal(size=(2, 50)),
            acceptance={"a": [0.4, 0.45], "b": [0.2, 0.25]},
            final_scales={"a": [1.0, 1.1], "b": [0.5, 0.6]},
            seed=7,
            config_echo={"n_iterations": 100},
        )

    def test_round_trip_bit_exact(self, tmp_path):
        arch = self._make()
        arch.save(tmp_path / "arch")
        back = PosteriorArchive.load(tmp_path / "arch")
        assert np.array_equal(back.draws, arch.draws)
        assert np.array_equal(back.logpost, arch.logpost)
        assert back.param_names == arch.param_names
        assert back.param_groups == arch.param_groups
        assert back.acceptance == arch.acceptance
        assert back.seed == arch.seed

    def test_save_twice_byte_identical(self, tmp_path):
        arch = self._make()
        arch.save(tmp_path / "a1")
        arch.save(tmp_path / "a2")
        for name in ("manifest.json", "a.npy", "b.npy", "logpost.npy"):
            assert (tmp_path / "a1" / name).read_bytes() == (tmp_path / "a2" / name).read_bytes()

    def test_overwrite_replaces_content(self, tmp_path):
        a = self._make(seed=0)
        b = self._make(seed=1)
        a.save(tmp_path / "arch")
        b.save(tmp_path / "arch")
        back = PosteriorArchive.load(tmp_path / "arch")
        assert np.array_equal(back.draws, b.draws)

    def test_group_view(self):
        arch = self._make()
        assert arch.group("b").shape == (2, 50, 2)
        assert np.array_equal(arch.group("b"), arch.draws[:, :, 1:3])
