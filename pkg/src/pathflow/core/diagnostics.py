"""
Oracle-backed experiments on the gradient estimators.

Includes replicate-based variance and bias measurement, the closed-form
1-D affine flow used as a Fisher-information and exact-gradient oracle,
the singular-weight batch construction, the score zero-mean test and the
gradient-norm trace used for plotting.
"""

import logging
import re
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from pathflow.core import estimators, flow
from pathflow.core.errors import ConstructionError, DegenerateWeights, NumericError, ParseError, UsageError
from pathflow.core.schemas import (
    EstimatorId,
    FlowArchitecture,
    SingularRegimeReport,
    SingularRegimeSpec,
    VarianceReport,
)
from pathflow.core.target import DoubleWellAction, GaussianTarget, Target
from pathflow.utils.io_helpers import read_csv, write_csv

logger = logging.getLogger(__name__)

SCALE_BIAS = "layer1.scale.0.bias"
SHIFT_BIAS = "layer1.shift.0.bias"


# Replicates
def _one_replicate(estimator_id, model, target, N, seed_seq):
    z = np.random.default_rng(seed_seq).normal(0.0, model.arch.base_stddev, size=(N, model.T))
    try:
        return estimators.evaluate(estimator_id, model, target, z).grad, None
    except (NumericError, DegenerateWeights) as e:
        return None, f"{type(e).__name__}: {e}"


def replicate_gradients(estimator_id: EstimatorId, model: flow.FlowModel, target: Target, N: int,
                        R: int, seed: int = 0, workers: int = 1) -> tuple[np.ndarray, list[dict]]:
    """
    Evaluate an estimator on R independent batches.

    Returns:
        tuple: (grads of shape (successes, n_params), failures as {replicate, reason})
    """
    seeds = np.random.SeedSequence(seed).spawn(R)
    results = Parallel(n_jobs=workers)(
        delayed(_one_replicate)(estimator_id, model, target, N, s) for s in seeds
    ) if workers > 1 else [_one_replicate(estimator_id, model, target, N, s) for s in seeds]

    grads, failures = [], []
    for index, (grad, reason) in enumerate(results):
        if grad is None:
            logger.warning("replicate %d of %s failed: %s", index, estimator_id, reason)
            failures.append({"replicate": index, "reason": reason})
        else:
            grads.append(grad)
    return np.array(grads).reshape(len(grads), model.n_params), failures


def measure_variance(estimator_id: EstimatorId, model: flow.FlowModel, target: Target, N: int,
                     R: int = 200, seed: int = 0, workers: int = 1) -> VarianceReport:
    """
    Componentwise mean and variance of an estimator over R batch replicates.

    Replicate failures are listed in the report; statistics use the
    successful replicates only.

    Raises:
        UsageError: R < 30, or fewer than two replicates succeeded
    """
    if R < 30:
        raise UsageError("variance needs at least 30 replicates")
    estimator_id = EstimatorId(estimator_id)
    grads, failures = replicate_gradients(estimator_id, model, target, N, R, seed, workers)
    if len(grads) < 2:
        raise UsageError(f"only {len(grads)} of {R} replicates succeeded")
    norms = np.linalg.norm(grads, axis=1)
    return VarianceReport(
        estimator_id=estimator_id,
        batch_size=N,
        n_replicates=R,
        mean=grads.mean(axis=0).tolist(),
        variance=grads.var(axis=0, ddof=1).tolist(),
        norm_mean=float(norms.mean()),
        norm_variance=float(norms.var(ddof=1)),
        seed=seed,
        failures=failures,
        model=model.arch.model_dump(mode="json"),
        target=target.describe(),
    )


# 1-D affine oracle
def affine_oracle_model(shift: float, log_scale: float, base_stddev: float = 1.0,
                        clamp: float = 5.0) -> flow.FlowModel:
    """
    A 1-D flow computing x = z exp(s) + t with s = log_scale and t = shift.

    Two bias-only coupling layers; the first passes its single site through,
    the second sees a masked (zero) input so only its biases matter:
    s = clamp * tanh(b_s) and t = b_t.
    """
    if abs(log_scale) >= clamp:
        raise UsageError("|log_scale| must stay below the clamp")
    arch = FlowArchitecture(T=1, n_layers=2, hidden_layers=0, width=1, base_stddev=base_stddev, clamp=clamp)
    model = flow.FlowModel(arch, np.zeros(sum(s.size for s in flow.build_layout(arch))))
    theta = model.theta.copy()
    theta[model.slot(SCALE_BIAS).start] = np.arctanh(log_scale / clamp)
    theta[model.slot(SHIFT_BIAS).start] = shift
    return model.with_theta(theta)


def _affine_parts(model: flow.FlowModel):
    b_s = model.theta[model.slot(SCALE_BIAS).start]
    t = model.theta[model.slot(SHIFT_BIAS).start]
    clamp = model.arch.clamp
    s = clamp * np.tanh(b_s)
    ds_db = clamp / np.cosh(b_s) ** 2
    return t, model.arch.base_stddev * np.exp(s), ds_db


def affine_fisher_information(model: flow.FlowModel) -> np.ndarray:
    """
    Diagonal of the Fisher information of the oracle's q over theta.

    For a Gaussian N(t, sigma^2): I_tt = 1/sigma^2 and I for log sigma is 2;
    the scale bias picks up (ds/db_s)^2. Every other parameter has zero
    information.
    """
    _, sigma_q, ds_db = _affine_parts(model)
    info = np.zeros(model.n_params)
    info[model.slot(SHIFT_BIAS).start] = 1.0 / sigma_q ** 2
    info[model.slot(SCALE_BIAS).start] = 2.0 * ds_db ** 2
    return info


def exact_forward_kl_grad(model: flow.FlowModel, mean: float, stddev: float) -> np.ndarray:
    """d/dtheta KL(p||q) for p = N(mean, stddev^2) and the affine oracle q."""
    t, sigma_q, ds_db = _affine_parts(model)
    grad = np.zeros(model.n_params)
    grad[model.slot(SHIFT_BIAS).start] = -(mean - t) / sigma_q ** 2
    grad[model.slot(SCALE_BIAS).start] = (1.0 - (stddev ** 2 + (mean - t) ** 2) / sigma_q ** 2) * ds_db
    return grad


def exact_reverse_kl_grad(model: flow.FlowModel, mean: float, stddev: float) -> np.ndarray:
    """d/dtheta KL(q||p) for p = N(mean, stddev^2) and the affine oracle q."""
    t, sigma_q, ds_db = _affine_parts(model)
    grad = np.zeros(model.n_params)
    grad[model.slot(SHIFT_BIAS).start] = (t - mean) / stddev ** 2
    grad[model.slot(SCALE_BIAS).start] = (sigma_q ** 2 / stddev ** 2 - 1.0) * ds_db
    return grad


def measure_bias(estimator_id: EstimatorId, model: flow.FlowModel, target: GaussianTarget,
                 batch_sizes=(64, 128, 256, 512), R: int = 2000, seed: int = 0,
                 workers: int = 1) -> pd.DataFrame:
    """
    Empirical bias of a forward-KL estimator against the exact gradient of
    the affine oracle, one row per batch size.

    Returns:
        pd.DataFrame: batch_size, bias_shift, bias_scale, bias_norm, stderr_norm, failures
    """
    if model.T != 1 or target.T != 1:
        raise UsageError("bias measurement needs the 1-D affine oracle and a 1-D Gaussian target")
    exact = exact_forward_kl_grad(model, float(target.mean[0]), float(target.stddev[0]))
    active = [model.slot(SHIFT_BIAS).start, model.slot(SCALE_BIAS).start]
    rows = []
    for offset, N in enumerate(batch_sizes):
        grads, failures = replicate_gradients(estimator_id, model, target, N, R, seed + offset, workers)
        diff = grads[:, active] - exact[active]
        bias = diff.mean(axis=0)
        se = diff.std(axis=0, ddof=1) / np.sqrt(len(diff))
        norm = float(np.linalg.norm(bias))
        stderr = float(np.sqrt(np.sum((bias / norm) ** 2 * se ** 2))) if norm > 0 else float(np.linalg.norm(se))
        rows.append({"batch_size": N, "bias_shift": bias[0], "bias_scale": bias[1],
                     "bias_norm": norm, "stderr_norm": stderr, "failures": len(failures)})
    return pd.DataFrame(rows)


def collapsed_model(arch: FlowArchitecture, center: float, stddev: float) -> flow.FlowModel:
    """
    A flow whose samples sit in one well only: q = N(center, stddev^2) on
    every site, built from the first two coupling layers (odd then even
    sites); any further layers are the identity.
    """
    if arch.n_layers < 2:
        raise UsageError("collapsed model needs at least two coupling layers")
    log_scale = np.log(stddev / arch.base_stddev)
    if abs(log_scale) >= arch.clamp:
        raise UsageError("stddev / base_stddev is outside the clamp range")
    model = flow.FlowModel(arch, np.zeros(sum(s.size for s in flow.build_layout(arch))))
    theta = model.theta.copy()
    final = arch.hidden_layers
    for layer in (0, 1):
        free = 1.0 - flow.coupling_mask(arch.T, layer)
        scale = model.slot(f"layer{layer}.scale.{final}.bias")
        shift = model.slot(f"layer{layer}.shift.{final}.bias")
        theta[scale.start:scale.stop] = np.arctanh(log_scale / arch.clamp) * free
        theta[shift.start:shift.stop] = center * free
    return model.with_theta(theta)


# Singular-weight regime
def target_mode(target: Target) -> np.ndarray:
    """A configuration at a mode of the target."""
    if isinstance(target, DoubleWellAction):
        return np.full(target.T, target.minimum)
    if isinstance(target, GaussianTarget):
        return target.mean.copy()
    x = np.zeros(target.T)
    for _ in range(2000):
        x -= 1e-2 * target.action_grad(x)
    return x


def _per_sample_paths(model: flow.FlowModel, z: np.ndarray, G: np.ndarray) -> np.ndarray:
    return np.stack([flow.contract_path(model, z[i:i + 1], G[i:i + 1]) for i in range(len(z))])


def singular_batch(spec: SingularRegimeSpec, model: flow.FlowModel, target: Target) -> tuple[np.ndarray, float, float]:
    """
    Base samples with one sample near a target mode (last row) and N-1
    samples pushed into the tail.

    The tail radius grows until both the summed weight ratio
    sum_i w_i / w_N and the path-gradient-weighted ratio
    sum_i (w_i / w_N) |grad_i| / |grad_N| are at most epsilon.

    Returns:
        tuple: (z of shape (N, T), achieved ratio, tail radius)

    Raises:
        ConstructionError: No radius within `max_attempts` reaches epsilon
    """
    rng = np.random.default_rng(spec.seed)
    x_mode = target_mode(target) + 1e-3 * rng.standard_normal(target.T)
    z_single, _ = flow.inverse(model, x_mode[None, :])
    directions = rng.normal(0.0, model.arch.base_stddev, size=(spec.N - 1, model.T))

    best = np.inf
    radius = 1.0
    for _ in range(spec.max_attempts):
        radius *= 1.5
        z = np.vstack([radius * directions, z_single])
        try:
            _, lw, G = estimators.config_gradient(model, target, z)
        except NumericError:
            break
        ratios = np.exp(lw[:-1] - lw[-1])
        achieved = float(np.sum(ratios))
        if achieved <= spec.epsilon:
            paths = _per_sample_paths(model, z, G)
            singular_norm = np.linalg.norm(paths[-1])
            if singular_norm == 0:
                raise ConstructionError("singular sample has a zero path gradient", achieved)
            weighted = float(np.sum(ratios * np.linalg.norm(paths[:-1], axis=1)) / singular_norm)
            achieved = max(achieved, weighted)
            if achieved <= spec.epsilon:
                logger.debug("singular batch at radius %.3g, ratio %.3e", radius, achieved)
                return z, achieved, radius
        best = min(best, achieved)
    raise ConstructionError(f"could not separate the tail to epsilon={spec.epsilon:g}", best)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


def singular_regime_probe(spec: SingularRegimeSpec, model: flow.FlowModel, target: Target) -> SingularRegimeReport:
    """
    Gradient norms and directions on a singular-weight batch.

    The reverse-side comparison is the weight-form path gradient
    -(1/N) sum_i grad(w_i) / w_N, whose leading term is the singular sample's
    path gradient just as for PathPQ.
    """
    z, achieved, radius = singular_batch(spec, model, target)
    _, lw, G = estimators.config_gradient(model, target, z)
    path = estimators.evaluate(EstimatorId.PATH_PQ, model, target, z).grad
    zpath = estimators.evaluate(EstimatorId.ZPATH_PQ, model, target, z).grad
    coeffs = np.exp(lw - lw[-1]) / len(z)
    weight_form = flow.contract_path(model, z, coeffs[:, None] * G)
    singular = flow.contract_path(model, z[-1:], G[-1:])

    norm_path = float(np.linalg.norm(path))
    norm_zpath = float(np.linalg.norm(zpath))
    return SingularRegimeReport(
        norm_pathpq=norm_path,
        norm_zpathpq=norm_zpath,
        norm_pathqp=float(np.linalg.norm(weight_form)),
        ratio_zpath_to_path=norm_zpath / norm_path if norm_path > 0 else float("inf"),
        cosine_pathpq_singular=_cosine(path, singular),
        cosine_pathpq_pathqp=_cosine(path, weight_form),
        achieved_ratio=achieved,
        tail_radius=radius,
    )


# Score term
class ScoreTest(NamedTuple):
    mean_norm: float
    stderr: float
    passed: bool


def score_zero_mean_test(model: flow.FlowModel, N: int, seed: int = 0, n_chunks: int = 100,
                         n_sigma: float = 4.0) -> ScoreTest:
    """
    Monte-Carlo mean of the score term over N flow samples.

    The samples are split into chunks whose batch means give componentwise
    standard errors; the test passes when every component lies within
    n_sigma standard errors of zero.
    """
    if N < 2 * n_chunks:
        raise UsageError(f"need at least {2 * n_chunks} samples for {n_chunks} chunks")
    z = np.random.default_rng(seed).normal(0.0, model.arch.base_stddev, size=(N, model.T))
    chunk_means = np.stack([flow.score_grad_logq(model, part) for part in np.array_split(z, n_chunks)])
    mean = chunk_means.mean(axis=0)
    se = chunk_means.std(axis=0, ddof=1) / np.sqrt(n_chunks)
    passed = bool(np.all(np.abs(mean) <= n_sigma * se + 1e-12))
    return ScoreTest(float(np.linalg.norm(mean)), float(np.linalg.norm(se)), passed)


# Gradient-norm trace
REQUIRED_COLUMNS = ("iter", "grad_norm", "estimator_id")


def _read_metrics(path: Path) -> pd.DataFrame:
    if not path.is_file():
        raise UsageError(f"metrics file not found: {path}")
    try:
        df = read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"{path} is empty", line=1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(f"{path}: malformed CSV", line=int(match.group(1)) if match else None) from e
    if df.empty:
        raise ParseError(f"{path} has no rows", line=2)
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}", line=1)
    for column in ("iter", "grad_norm"):
        numeric = pd.to_numeric(df[column], errors="coerce")
        bad = numeric.isna()
        if bad.any():
            # header is line 1
            raise ParseError(f"{path}: non-numeric {column}", line=int(np.flatnonzero(bad.to_numpy())[0]) + 2)
        df[column] = numeric
    return df


def gradnorm_trace(metrics_path: str | Path, out_path: str | Path | None = None,
                   alpha: float = 0.01) -> pd.DataFrame:
    """
    (iter, grad_norm) series per estimator plus an EMA-smoothed copy, two
    columns per series, for external plotting.

    Raises:
        ParseError: Empty or malformed metrics CSV
    """
    df = _read_metrics(Path(metrics_path))
    series = []
    for estimator_id, group in df.groupby("estimator_id", sort=False):
        group = group.sort_values("iter")
        raw = group[["iter", "grad_norm"]].reset_index(drop=True)
        smooth = raw.assign(grad_norm=raw["grad_norm"].ewm(alpha=alpha, adjust=False).mean())
        series.append(raw.rename(columns=lambda c: f"{estimator_id}.{c}"))
        series.append(smooth.rename(columns=lambda c: f"{estimator_id}_ema.{c}"))
    trace = pd.concat(series, axis=1)
    if out_path is not None:
        write_csv(trace, out_path)
    return trace
