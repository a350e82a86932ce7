"""
Training loop: Adam, a plateau learning-rate schedule, estimator switching,
metrics logging and checkpointing.
"""

import logging
import time
import tracemalloc
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from pathflow.core import estimators, flow
from pathflow.core.errors import DegenerateWeights, NumericError, TrainingAborted
from pathflow.core.sampling import reverse_ess, sample_log_weights
from pathflow.core.schemas import TRAINABLE_ESTIMATORS, EstimatorId, MetricsRow, TrainConfig
from pathflow.core.target import Target
from pathflow.utils.constants import (
    ABORT_DUMP_NAME,
    CHECKPOINT_NAME,
    CHECKPOINT_PATTERN,
    METRICS_CSV_NAME,
    TIMING_CSV_NAME,
)
from pathflow.utils.io_helpers import Checkpoint, save_checkpoint, write_csv, write_yaml

logger = logging.getLogger(__name__)

TIMING_COLUMNS = ("iter", "estimator_id", "wall_ms")


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    lr: float
    seed: int
    rng: np.random.Generator
    step: int = 0
    iteration: int = 0
    best_loss: float = float("inf")
    plateau_counter: int = 0
    skip_count: int = 0
    estimator_id: EstimatorId = EstimatorId.PATH_QP

    @classmethod
    def initial(cls, model: flow.FlowModel, cfg: TrainConfig, seed: int | None = None) -> "TrainState":
        seed = cfg.seed if seed is None else seed
        seed = 0 if seed is None else seed
        zeros = np.zeros(model.n_params)
        return cls(theta=model.theta.copy(), m=zeros, v=zeros.copy(), lr=cfg.lr0, seed=seed,
                   rng=np.random.Generator(np.random.PCG64(seed)),
                   estimator_id=active_estimator(cfg, 0))

    def optimizer_header(self) -> dict:
        return {
            "step": self.step,
            "iteration": self.iteration,
            "lr": self.lr,
            "best_loss": self.best_loss,
            "plateau_counter": self.plateau_counter,
            "skip_count": self.skip_count,
            "estimator_id": str(self.estimator_id),
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        """Rebuild the optimizer state stored next to the parameters."""
        opt = ckpt.optimizer
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = opt["rng_state"]
        return cls(theta=ckpt.model.theta.copy(), m=ckpt.m, v=ckpt.v, lr=float(opt["lr"]),
                   seed=int(opt["seed"]), rng=rng, step=int(opt["step"]), iteration=int(opt["iteration"]),
                   best_loss=float(opt["best_loss"]), plateau_counter=int(opt["plateau_counter"]),
                   skip_count=int(opt["skip_count"]), estimator_id=EstimatorId(opt["estimator_id"]))


@dataclass
class TrainResult:
    model: flow.FlowModel
    state: TrainState
    metrics: pd.DataFrame
    stop_reason: str
    checkpoints: list[Path] = field(default_factory=list)


def adam_step(state: TrainState, grad: np.ndarray, cfg: TrainConfig) -> TrainState:
    """
    One bias-corrected Adam update; returns a new state.

    A non-finite gradient leaves the parameters and moments untouched and
    increments the skip counter.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        logger.warning("non-finite gradient at iteration %d; step skipped", state.iteration)
        return replace(state, skip_count=state.skip_count + 1)
    beta1, beta2 = cfg.betas
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = state.theta - state.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return replace(state, theta=theta, m=m, v=v, step=step)


def plateau_schedule(state: TrainState, loss: float, cfg: TrainConfig) -> TrainState:
    """Decay lr by `lr_factor` (floored at `lr_min`) after `plateau_patience` steps without improvement."""
    if loss < state.best_loss:
        return replace(state, best_loss=float(loss), plateau_counter=0)
    counter = state.plateau_counter + 1
    if counter < cfg.plateau_patience:
        return replace(state, plateau_counter=counter)
    lr = max(state.lr * cfg.lr_factor, cfg.lr_min)
    if lr < state.lr:
        logger.info("plateau: learning rate %.3g -> %.3g", state.lr, lr)
    return replace(state, lr=lr, plateau_counter=0)


def active_estimator(cfg: TrainConfig, iteration: int) -> EstimatorId:
    rule = cfg.switch_rule
    if rule is not None and iteration < rule.switch_at_iter:
        return rule.start_estimator
    return cfg.estimator


def held_out_ess(model: flow.FlowModel, target: Target, cfg: TrainConfig, seed: int, iteration: int) -> float:
    """Reverse ESS on a fresh batch whose seed depends only on (seed, iteration)."""
    _, lw = sample_log_weights(model, target, cfg.eval_batch_size, np.random.default_rng([seed, iteration]))
    return reverse_ess(lw)


def _write_abort_dump(out_dir: Path | None, model: flow.FlowModel, state: TrainState,
                      errors: list[str], target_desc: dict) -> Path | None:
    if out_dir is None:
        return None
    dump_path = out_dir / ABORT_DUMP_NAME
    write_yaml(dump_path, {
        "iteration": state.iteration,
        "estimator_id": str(state.estimator_id),
        "lr": state.lr,
        "skip_count": state.skip_count,
        "theta_abs_max": float(np.max(np.abs(state.theta))) if state.theta.size else 0.0,
        "recent_errors": errors,
        "target": target_desc,
    })
    save_checkpoint(out_dir / "abort.ckpt", model, target_desc, state.optimizer_header(), (state.m, state.v))
    return dump_path


def train(model: flow.FlowModel, target: Target, cfg: TrainConfig, out_dir: str | Path | None = None,
          workers: int = 1, state: TrainState | None = None, target_header: dict | None = None) -> TrainResult:
    """
    Optimize the flow with the configured estimator.

    Each iteration draws a base batch, evaluates the active estimator,
    applies Adam and steps the plateau schedule. Every `eval_every`
    iterations the reverse ESS of a held-out batch is measured and, with an
    output directory, a checkpoint is written. Switching estimators keeps the
    Adam moments.

    Args:
        model: Initial flow (ignored for parameters when `state` is given)
        target: Target density
        cfg: Training settings
        out_dir: Directory for metrics.csv, timing.csv and checkpoints, or None
        workers: Batch shards per estimator evaluation
        state: Resume from this state instead of a fresh one
        target_header: Target section stored in checkpoints (defaults to target.describe())

    Returns:
        TrainResult: Final model, optimizer state and the metrics frame

    Raises:
        TrainingAborted: More than `max_consecutive_failures` failed batches in a row
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    state = state if state is not None else TrainState.initial(model, cfg)
    model = model.with_theta(state.theta)
    target_desc = target_header if target_header is not None else target.describe()

    rows: list[dict] = []
    checkpoints: list[Path] = []
    recent_errors: list[str] = []
    failures = 0
    stop_reason = "max_iters"
    start = time.perf_counter()

    iterations = range(state.iteration, cfg.max_iters)
    bar = tqdm(iterations, desc=f"train {cfg.estimator}", disable=not cfg.progress, leave=False)
    for it in bar:
        estimator_id = active_estimator(cfg, it)
        switched = int(estimator_id != state.estimator_id)
        if switched:
            logger.info("iteration %d: switching estimator %s -> %s", it, state.estimator_id, estimator_id)
        state = replace(state, estimator_id=estimator_id, iteration=it)

        z = state.rng.normal(0.0, model.arch.base_stddev, size=(cfg.batch_size, model.T))
        try:
            estimate = estimators.evaluate(estimator_id, model, target, z, workers=workers)
            if not np.all(np.isfinite(estimate.grad)):
                raise NumericError("non-finite gradient")
        except (NumericError, DegenerateWeights) as e:
            failures += 1
            recent_errors = (recent_errors + [f"iter {it}: {e}"])[-cfg.max_consecutive_failures:]
            state = replace(state, skip_count=state.skip_count + 1, iteration=it + 1)
            logger.warning("iteration %d: batch skipped (%s)", it, e)
            if failures > cfg.max_consecutive_failures:
                dump = _write_abort_dump(out_dir, model, state, recent_errors, target_desc)
                raise TrainingAborted(f"{failures} consecutive numeric failures at iteration {it}", dump)
            continue
        failures = 0

        state = adam_step(state, estimate.grad, cfg)
        state = replace(state, iteration=it + 1)
        model = model.with_theta(state.theta)
        if not estimator_id.is_forward:
            state = plateau_schedule(state, estimate.loss, cfg)

        is_eval = (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.max_iters
        ess = reverse_ess(estimate.log_wtilde)
        if is_eval:
            try:
                ess = held_out_ess(model, target, cfg, state.seed, it)
            except (NumericError, DegenerateWeights) as e:
                logger.warning("iteration %d: held-out evaluation failed (%s)", it, e)
                ess = 0.0
            if estimator_id.is_forward:
                state = plateau_schedule(state, -np.log(max(ess, 1e-300)), cfg)
            if out_dir is not None:
                path = out_dir / CHECKPOINT_PATTERN.format(iteration=it + 1)
                checkpoints.append(save_checkpoint(path, model, target_desc, state.optimizer_header(),
                                                   (state.m, state.v)))

        if it % cfg.log_every == 0 or is_eval or switched:
            rows.append(MetricsRow(
                iter=it,
                wall_ms=(time.perf_counter() - start) * 1e3,
                loss_surrogate=estimate.loss,
                grad_norm=estimate.grad_norm,
                reverse_ess=ess,
                lr=state.lr,
                estimator_id=estimator_id,
                skipped=state.skip_count,
                switched=switched,
            ).model_dump(mode="json"))
            bar.set_postfix(loss=f"{estimate.loss:.4g}", ess=f"{ess:.3f}")

        if cfg.max_walltime_s is not None and time.perf_counter() - start > cfg.max_walltime_s:
            stop_reason = "walltime"
            logger.info("walltime budget of %.1fs reached at iteration %d", cfg.max_walltime_s, it)
            break

    metrics = pd.DataFrame(rows, columns=list(MetricsRow.model_fields))
    if out_dir is not None:
        write_metrics(metrics, out_dir)
        checkpoints.append(save_checkpoint(out_dir / CHECKPOINT_NAME, model, target_desc,
                                           state.optimizer_header(), (state.m, state.v)))
    return TrainResult(model=model, state=state, metrics=metrics, stop_reason=stop_reason,
                       checkpoints=checkpoints)


def write_metrics(metrics: pd.DataFrame, out_dir: Path) -> Path:
    """Write metrics.csv without wall time and the (iter, estimator_id, wall_ms) columns to timing.csv."""
    path = out_dir / METRICS_CSV_NAME
    # wall time stays out of metrics.csv so equal seeds give equal bytes
    write_csv(metrics.drop(columns="wall_ms"), path)
    write_csv(metrics[list(TIMING_COLUMNS)], out_dir / TIMING_CSV_NAME)
    return path


def timing_probe(model: flow.FlowModel, target: Target, N: int, reps: int = 5,
                 estimator_ids=TRAINABLE_ESTIMATORS, seed: int = 0) -> dict[EstimatorId, float]:
    """Median wall time (ms) of one gradient evaluation per estimator, same batch for all."""
    z = np.random.default_rng(seed).normal(0.0, model.arch.base_stddev, size=(N, model.T))
    timings = {}
    for estimator_id in estimator_ids:
        estimators.evaluate(estimator_id, model, target, z)
        samples = []
        for _ in range(reps):
            tick = time.perf_counter()
            estimators.evaluate(estimator_id, model, target, z)
            samples.append((time.perf_counter() - tick) * 1e3)
        timings[EstimatorId(estimator_id)] = float(np.median(samples))
        logger.debug("%s: %.2f ms/iter", estimator_id, timings[estimator_id])
    return timings


def memory_probe(model: flow.FlowModel, target: Target, N: int,
                 estimator_ids=(EstimatorId.REP_QP, EstimatorId.PATH_QP), seed: int = 0) -> dict[EstimatorId, int]:
    """Peak traced allocation (bytes) of one gradient evaluation per estimator."""
    z = np.random.default_rng(seed).normal(0.0, model.arch.base_stddev, size=(N, model.T))
    peaks = {}
    for estimator_id in estimator_ids:
        tracemalloc.start()
        try:
            estimators.evaluate(estimator_id, model, target, z)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        peaks[EstimatorId(estimator_id)] = int(peak)
    return peaks
