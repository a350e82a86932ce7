"""
Importance weights, partition-function and ESS estimates, neural importance
sampling, and an overrelaxed HMC sampler for ground-truth target draws.

All weight arithmetic runs in log space (log-sum-exp), so weights spanning
hundreds of orders of magnitude stay representable.
"""

import logging
from dataclasses import dataclass
from math import log
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp
from sklearn.utils import resample
from tqdm import tqdm

from pathflow.core import flow
from pathflow.core.errors import ChainFailure, DegenerateWeights, NumericError, UsageError
from pathflow.core.schemas import EssReport, HmcConfig, HmcSummary
from pathflow.core.target import Target

logger = logging.getLogger(__name__)

# Flow evaluations are chunked so large ESS batches keep a bounded footprint.
EVAL_CHUNK = 8192

# A chain that keeps blowing up is reported instead of restarted forever.
MAX_RESTARTS_PER_CHAIN = 100


# Importance weights
def _check_log_weights(log_wtilde, minimum: int) -> np.ndarray:
    lw = np.asarray(log_wtilde, dtype=np.float64).ravel()
    if lw.size < minimum:
        raise UsageError(f"need at least {minimum} weights, got {lw.size}")
    if np.any(np.isnan(lw)) or not np.any(np.isfinite(lw)):
        raise DegenerateWeights("all importance weights are zero or NaN")
    return lw


def log_z_hat(log_wtilde) -> float:
    """log of (1/N) sum_i exp(log_wtilde_i)."""
    lw = _check_log_weights(log_wtilde, 1)
    return float(logsumexp(lw) - log(lw.size))


def z_hat(log_wtilde) -> float:
    """Partition-function estimate: the mean unnormalized weight."""
    return float(np.exp(log_z_hat(log_wtilde)))


def normalized_weights(log_wtilde) -> np.ndarray:
    """Self-normalized weights w_i / sum_j w_j (sum to one)."""
    lw = _check_log_weights(log_wtilde, 1)
    return np.exp(lw - logsumexp(lw))


def reverse_ess(log_wtilde) -> float:
    """(sum w)^2 / (N sum w^2) from flow samples."""
    lw = _check_log_weights(log_wtilde, 2)
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw) - log(lw.size)))


def forward_ess(log_wtilde_p, z_hat_from_q: float) -> float:
    """
    1 / mean(w_i / z_hat) over target samples x_i ~ p.

    Args:
        log_wtilde_p: log unnormalized weights of the target samples
        z_hat_from_q: Partition-function estimate from an independent flow batch
    """
    lw = _check_log_weights(log_wtilde_p, 2)
    if not z_hat_from_q > 0:
        raise DegenerateWeights("partition-function estimate is not positive")
    return float(np.exp(log(z_hat_from_q) - (logsumexp(lw) - log(lw.size))))


def _chunks(n: int):
    for start in range(0, n, EVAL_CHUNK):
        yield slice(start, min(start + EVAL_CHUNK, n))


def log_weights_at(model: flow.FlowModel, target: Target, x: np.ndarray) -> np.ndarray:
    """log w(x) = -S(x) - log q(x) for arbitrary configurations."""
    return np.concatenate([
        -target.action(x[part]) - flow.log_prob(model, x[part]) for part in _chunks(len(x))
    ])


def sample_log_weights(model: flow.FlowModel, target: Target, n: int,
                       rng: np.random.Generator) -> tuple[flow.Batch, np.ndarray]:
    """Draw n flow samples and their log unnormalized weights."""
    parts = [flow.sample(model, part.stop - part.start, rng) for part in _chunks(n)]
    batch = flow.Batch(z=np.concatenate([b.z for b in parts]),
                       x=np.concatenate([b.x for b in parts]),
                       log_q=np.concatenate([b.log_q for b in parts]))
    return batch, -target.action(batch.x) - batch.log_q


def bootstrap_ess_interval(values: np.ndarray, statistic: Callable[[np.ndarray], float],
                           n_resamples: int = 1000, seed: int = 0,
                           quantiles: tuple[float, float] = (0.16, 0.84)) -> tuple[float, float]:
    """Percentile bootstrap interval of a statistic (68% by default)."""
    rng = np.random.RandomState(seed)
    stats = [statistic(resample(values, replace=True, random_state=rng)) for _ in range(n_resamples)]
    low, high = np.quantile(stats, quantiles)
    return float(low), float(high)


def evaluate_ess(model: flow.FlowModel, target: Target, n_q_samples: int, q_seed: int,
                 p_samples: np.ndarray | None = None, z_seed: int | None = None,
                 n_bootstrap: int = 1000, collapse_ratio: float = 0.6) -> EssReport:
    """
    Reverse ESS from a flow batch and, given target samples, forward ESS.

    The forward estimate needs Z; it comes from an independent flow batch of
    the same size drawn with `z_seed`.

    Returns:
        EssReport: Both estimates with bootstrap intervals, seeds and the
        mode-collapse flag (forward < collapse_ratio * reverse)
    """
    if n_q_samples < 2:
        raise UsageError("n_q_samples must be at least 2")
    _, lw_q = sample_log_weights(model, target, n_q_samples, np.random.default_rng(q_seed))
    rev = reverse_ess(lw_q)
    report = EssReport(
        reverse_ess=rev,
        reverse_interval=bootstrap_ess_interval(lw_q, reverse_ess, n_bootstrap, seed=q_seed),
        z_hat=z_hat(lw_q),
        log_z_hat=log_z_hat(lw_q),
        n_q_samples=n_q_samples,
        q_seed=q_seed,
    )
    if p_samples is None:
        return report

    z_seed = q_seed + 1 if z_seed is None else z_seed
    _, lw_z = sample_log_weights(model, target, n_q_samples, np.random.default_rng(z_seed))
    z_from_q = z_hat(lw_z)
    lw_p = log_weights_at(model, target, np.asarray(p_samples, dtype=np.float64))
    fwd = forward_ess(lw_p, z_from_q)
    report.forward_ess = fwd
    report.forward_interval = bootstrap_ess_interval(lw_p, lambda lw: forward_ess(lw, z_from_q),
                                                     n_bootstrap, seed=z_seed)
    report.n_p_samples = int(len(lw_p))
    report.z_seed = z_seed
    report.mode_collapse = bool(fwd < collapse_ratio * rev)
    return report


def nis_estimate(model: flow.FlowModel, target: Target, observable: Callable[[np.ndarray], np.ndarray],
                 N: int, rng: np.random.Generator) -> tuple[float, float]:
    """
    Self-normalized importance estimate of E_p[Q] from N flow samples.

    The standard error uses the weighted variance of Q over N * ESS
    effective samples.

    Returns:
        tuple: (mean, stderr)
    """
    if N < 2:
        raise UsageError("nis_estimate needs N >= 2")
    batch, lw = sample_log_weights(model, target, N, rng)
    q = np.asarray(observable(batch.x), dtype=np.float64)
    w = np.exp(lw - np.max(_check_log_weights(lw, 2)))
    mean = float(np.sum(w * q) / np.sum(w))
    variance = float(np.sum(w * (q - mean) ** 2) / np.sum(w))
    return mean, float(np.sqrt(variance / (N * reverse_ess(lw))))


# HMC
@dataclass
class HmcResult:
    samples: np.ndarray
    summary: HmcSummary
    step_sizes: np.ndarray


def hamiltonian(target: Target, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    return target.action(x) + 0.5 * np.sum(p * p, axis=-1)


def leapfrog(target: Target, x: np.ndarray, p: np.ndarray, step_size, n_steps: int):
    """
    Leapfrog integration of dx/dt = p, dp/dt = -dS/dx.

    Time-reversible and volume-preserving; `step_size` may be a scalar or a
    per-chain column of shape (n_chains, 1).
    """
    x = np.array(x, dtype=np.float64)
    p = np.array(p, dtype=np.float64) - 0.5 * step_size * target.action_grad(x)
    for k in range(n_steps):
        x = x + step_size * p
        grad = target.action_grad(x)
        p = p - (step_size if k < n_steps - 1 else 0.5 * step_size) * grad
    return x, p


def well_occupancy(samples: np.ndarray) -> float:
    """Fraction of configurations whose lattice mean is positive."""
    return float(np.mean(np.mean(samples, axis=-1) > 0))


def _run_chains(target: Target, cfg: HmcConfig, seeds: list[np.random.SeedSequence],
                progress: bool) -> dict:
    gens = [np.random.default_rng(s) for s in seeds]
    n, T = len(gens), target.T

    def draw_normal():
        return np.stack([g.normal(size=T) for g in gens])

    def draw_uniform():
        return np.array([g.uniform() for g in gens])

    x = draw_normal()
    log_eps = np.full(n, log(cfg.step_size))
    kept = np.empty((n, cfg.n_steps, T))
    accepted = proposals = mirrors = mirror_accepts = restarts = 0
    chain_restarts = np.zeros(n, dtype=int)

    total = cfg.burn_in + cfg.n_steps
    for k in tqdm(range(total), desc="hmc", disable=not progress, leave=False):
        u = draw_uniform()
        if (k + 1) % cfg.overrelax_freq == 0:
            mirrored = -x
            alpha = np.minimum(1.0, np.exp(target.action(x) - target.action(mirrored)))
            take = u < alpha
            x = np.where(take[:, None], mirrored, x)
            mirrors += n
            mirror_accepts += int(take.sum())
        else:
            eps = np.exp(log_eps)[:, None]
            p = draw_normal()
            h0 = hamiltonian(target, x, p)
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    x_new, p_new = leapfrog(target, x, p, eps, cfg.n_leapfrog)
                    h1 = hamiltonian(target, x_new, p_new)
                except NumericError:
                    x_new, h1 = x, np.full(n, np.nan)
                alpha = np.where(np.isfinite(h1), np.minimum(1.0, np.exp(h0 - h1)), 0.0)
            failed = ~np.isfinite(h1)
            if np.any(failed):
                logger.warning("non-finite Hamiltonian in %d chain(s); restarting from a base sample",
                               int(failed.sum()))
                restarts += int(failed.sum())
                chain_restarts += failed
                if chain_restarts.max() > MAX_RESTARTS_PER_CHAIN:
                    raise ChainFailure(f"chain restarted more than {MAX_RESTARTS_PER_CHAIN} times")
                fresh = draw_normal()
                x = np.where(failed[:, None], fresh, x)
            take = (u < alpha) & ~failed
            x = np.where(take[:, None], x_new, x)
            if k >= cfg.burn_in:
                accepted += int(take.sum())
                proposals += n
            elif cfg.adapt_step_size:
                log_eps += (alpha - cfg.target_accept) / (k + 10) ** 0.6
        if k >= cfg.burn_in:
            kept[:, k - cfg.burn_in] = x

    return {"samples": kept, "step_sizes": np.exp(log_eps), "accepted": accepted,
            "proposals": proposals, "mirrors": mirrors, "mirror_accepts": mirror_accepts,
            "restarts": restarts}


def hmc_sample(target: Target, cfg: HmcConfig, seed: int | None = None, workers: int = 1) -> HmcResult:
    """
    Overrelaxed HMC: leapfrog proposals with a Metropolis test on the
    Hamiltonian, and every `overrelax_freq`-th step a mirror move x -> -x
    tested against the action (always accepted for even actions).

    Each chain draws from its own stream spawned from the master seed, so
    the samples do not depend on how chains are spread over workers.

    Returns:
        HmcResult: (n_chains * n_steps, T) samples in chain order, plus summary
    """
    seed = cfg.seed if seed is None else seed
    seed = 0 if seed is None else seed
    chain_seeds = np.random.SeedSequence(seed).spawn(cfg.n_chains)
    groups = [list(g) for g in np.array_split(np.arange(cfg.n_chains), min(workers, cfg.n_chains))]
    show = cfg.progress and workers == 1
    results = Parallel(n_jobs=workers)(
        delayed(_run_chains)(target, cfg, [chain_seeds[i] for i in group], show) for group in groups
    )

    samples = np.concatenate([r["samples"] for r in results]).reshape(-1, target.T)
    step_sizes = np.concatenate([r["step_sizes"] for r in results])
    proposals = sum(r["proposals"] for r in results)
    mirrors = sum(r["mirrors"] for r in results)
    summary = HmcSummary(
        n_samples=len(samples),
        n_chains=cfg.n_chains,
        acceptance_rate=sum(r["accepted"] for r in results) / max(proposals, 1),
        mirror_acceptance_rate=sum(r["mirror_accepts"] for r in results) / max(mirrors, 1),
        tuned_step_size=float(np.mean(step_sizes)),
        restarts=sum(r["restarts"] for r in results),
        well_occupancy=well_occupancy(samples),
        seed=seed,
    )
    if summary.restarts:
        logger.warning("HMC restarted chains %d time(s)", summary.restarts)
    return HmcResult(samples=samples, summary=summary, step_sizes=step_sizes)
