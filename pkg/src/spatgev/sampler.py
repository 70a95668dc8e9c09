"""Adaptive block random-walk Metropolis over a block-structured target,
multi-chain execution, and the split-Rhat / effective-sample-size
convergence diagnostics.

The sampler drives any object exposing the block-target protocol
(``blocks``, ``init_state``, ``load_state``, ``propose``, ``commit``,
``flat_state``, ``param_names``, ``param_groups``,
``log_posterior_value``); proposals are Gaussian innovations whose per-block
scales adapt during warmup toward the standard 0.44 (scalar) / 0.23
(multivariate) acceptance targets and are frozen afterwards. Chains carry
independent seed streams, so results are identical whether chains run
serially or in parallel.
"""

from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .archive import PosteriorArchive
from .target import InitializationError

_MAX_INIT_REDRAWS = 100


@dataclass
class ChainConfig:
    """Multi-chain run settings. Defaults mirror a 3 x 3000 protocol with
    the first 1000 iterations discarded as warmup."""

    n_chains: int = 3
    n_iterations: int = 3000
    n_warmup: int = 1000
    seed: int = 0
    adapt_window: int = 50
    block_scales: dict[str, float] = field(default_factory=dict)
    init_jitter: float = 0.1
    refresh_every: int = 500  # periodic cache rebuild, guards fp drift
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_warmup >= self.n_iterations:
            raise ValueError("n_warmup must be < n_iterations")
        if self.n_chains < 1:
            raise ValueError("need at least one chain")


def _initial_scales(target, config: ChainConfig) -> np.ndarray:
    scales = np.empty(len(target.blocks))
    for i, spec in enumerate(target.blocks):
        s = spec.initial_scale
        for key, val in config.block_scales.items():
            if spec.name == key or spec.name.startswith(key):
                s = val
        scales[i] = s
    return scales


def run_single_chain(target, config: ChainConfig, seed_seq: np.random.SeedSequence) -> dict:
    """One adaptive Metropolis chain; returns draws and per-block stats."""
    rng = np.random.default_rng(seed_seq)

    lp = -np.inf
    for attempt in range(_MAX_INIT_REDRAWS + 1):
        jitter = config.init_jitter * (1.0 + 0.2 * attempt)
        x0 = target.init_state(rng, jitter=jitter)
        lp = target.load_state(x0)
        if np.isfinite(lp):
            break
    else:
        raise InitializationError(
            f"log posterior still -inf after {_MAX_INIT_REDRAWS} init re-draws "
            f"(last jitter {jitter:.3f}); check the data and priors"
        )

    blocks = target.blocks
    nb = len(blocks)
    scales = _initial_scales(target, config)
    targets = np.array([b.target_accept for b in blocks])
    dims = [b.dim for b in blocks]

    # Haario-style proposal-covariance estimation for the blocks that ask
    # for it: Welford accumulators over warmup states, Cholesky refreshed at
    # batch boundaries, everything frozen after warmup
    adaptive = [b for b, spec in enumerate(blocks) if spec.adapt_cov]
    welford = {b: [0, np.zeros(dims[b]), np.zeros((dims[b], dims[b]))] for b in adaptive}
    prop_chol: dict[int, np.ndarray] = {}

    acc_total = np.zeros(nb, dtype=int)
    n_total = np.zeros(nb, dtype=int)
    acc_window = np.zeros(nb, dtype=int)

    n_kept = config.n_iterations - config.n_warmup
    draws = np.empty((n_kept, target.dim))
    logpost = np.empty(n_kept)

    batch = 0
    for it in range(config.n_iterations):
        if config.refresh_every and it > 0 and it % config.refresh_every == 0:
            target.load_state(target.flat_state())
        for b in range(nb):
            z = rng.standard_normal(dims[b])
            chol = prop_chol.get(b)
            eps = scales[b] * (chol @ z if chol is not None else z)
            delta = target.propose(b, eps)
            if np.log(rng.random()) < delta:
                target.commit()
                acc_window[b] += 1
        in_warmup = it < config.n_warmup
        if in_warmup:
            for b in adaptive:
                x = target.block_value(b)
                acc = welford[b]
                acc[0] += 1
                delta_x = x - acc[1]
                acc[1] += delta_x / acc[0]
                acc[2] += np.outer(delta_x, x - acc[1])
        else:
            acc_total += acc_window
            n_total += 1
        if in_warmup and (it + 1) % config.adapt_window == 0:
            batch += 1
            step = min(0.25, 1.0 / np.sqrt(batch))
            rates = acc_window / config.adapt_window
            scales *= np.exp(step * np.where(rates > targets, 1.0, -1.0))
            acc_window[:] = 0
            for b in adaptive:
                count, _, m2 = welford[b]
                if count >= 10 + 2 * dims[b]:
                    cov = m2 / (count - 1) + 1e-10 * np.eye(dims[b])
                    try:
                        chol = np.linalg.cholesky(cov)
                    except np.linalg.LinAlgError:
                        continue
                    if b not in prop_chol:
                        scales[b] = 2.38 / np.sqrt(dims[b])
                    prop_chol[b] = chol
        elif not in_warmup:
            acc_window[:] = 0
        if not in_warmup:
            kept = it - config.n_warmup
            draws[kept] = target.flat_state()
            logpost[kept] = target.log_posterior_value

    with np.errstate(invalid="ignore"):
        rates = np.where(n_total > 0, acc_total / np.maximum(n_total, 1), np.nan)
    return {
        "draws": draws,
        "logpost": logpost,
        "acceptance": rates,
        "scales": scales,
        "block_names": [b.name for b in blocks],
    }


def _chain_worker(args):
    target, config, entropy, chain_index = args
    seq = np.random.SeedSequence(entropy=entropy, spawn_key=(chain_index,))
    return run_single_chain(target, config, seq)


def run_chains(target, config: ChainConfig) -> PosteriorArchive:
    """Run ``config.n_chains`` independent adaptive Metropolis chains and
    assemble the posterior archive.

    Each chain samples on a deep copy of the target with its own seed
    stream; for ``n_jobs > 1`` chains run in separate processes with
    identical results.
    """
    args = [(target, config, config.seed, c) for c in range(config.n_chains)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_jobs, config.n_chains)) as ex:
            results = list(ex.map(_chain_worker, args))
    else:
        results = [_chain_worker((copy.deepcopy(target), config, config.seed, c)) for c in range(config.n_chains)]

    draws = np.stack([r["draws"] for r in results])
    logpost = np.stack([r["logpost"] for r in results])
    block_names = results[0]["block_names"]
    acceptance = {
        name: [float(r["acceptance"][i]) for r in results]
        for i, name in enumerate(block_names)
    }
    final_scales = {
        name: [float(r["scales"][i]) for r in results]
        for i, name in enumerate(block_names)
    }
    return PosteriorArchive(
        param_names=list(target.param_names),
        param_groups=dict(target.param_groups),
        draws=draws,
        logpost=logpost,
        acceptance=acceptance,
        final_scales=final_scales,
        seed=config.seed,
        config_echo={
            "n_chains": config.n_chains,
            "n_iterations": config.n_iterations,
            "n_warmup": config.n_warmup,
            "seed": config.seed,
            "adapt_window": config.adapt_window,
            "init_jitter": config.init_jitter,
            "refresh_every": config.refresh_every,
        },
    )


# ----------------------------------------------------------------------
# convergence diagnostics
# ----------------------------------------------------------------------

RHAT_SENTINEL = float("nan")


def rhat(draws) -> float:
    """Split-Rhat (potential scale reduction with halved chains).

    ``draws`` is (n_chains, n_iterations) with at least 2 chains of at least
    10 draws. Constant input returns NaN (the documented sentinel) rather
    than raising.
    """
    d = np.atleast_2d(np.asarray(draws, dtype=float))
    if d.shape[0] < 2 or d.shape[1] < 10:
        raise ValueError("rhat needs >= 2 chains with >= 10 draws each")
    n2 = d.shape[1] // 2
    halves = np.concatenate([d[:, :n2], d[:, n2 : 2 * n2]], axis=0)
    within = float(np.mean(np.var(halves, axis=1, ddof=1)))
    if within == 0.0:
        return RHAT_SENTINEL
    between = n2 * float(np.var(np.mean(halves, axis=1), ddof=1))
    var_plus = (n2 - 1) / n2 * within + between / n2
    return float(np.sqrt(var_plus / within))


def effective_sample_size(draws) -> float:
    """Autocorrelation-truncation effective sample size.

    Mean autocovariance across chains; autocorrelations summed by Geyer
    pairs until the first negative pair sum. Constant input returns NaN.
    """
    d = np.atleast_2d(np.asarray(draws, dtype=float))
    n_chains, n = d.shape
    if n < 100:
        raise ValueError("effective_sample_size needs >= 100 draws")
    centered = d - d.mean(axis=1, keepdims=True)
    var = float(np.mean(centered**2))
    if var == 0.0:
        return RHAT_SENTINEL
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n].real / n
    rho = np.mean(acov, axis=0) / np.mean(acov[:, 0])

    tau = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + (rho[k + 1] if k + 1 < n else 0.0)
        if pair <= 0.0:
            break
        tau += pair
    tau = max(2.0 * tau - 1.0, 1.0)
    return float(n_chains * n / tau)
