import logging
from pathlib import Path

import numpy as np
import pandas as pd

from pathflow.core import diagnostics, flow, sampling, training
from pathflow.core.errors import ConstructionError, DegenerateWeights, NumericError, PathflowError, UsageError
from pathflow.core.schemas import (
    EstimatorId,
    FlowArchitecture,
    RunConfig,
    SingularRegimeSpec,
    TargetConfig,
)
from pathflow.core.target import Target, build_target, gaussian_target
from pathflow.utils.constants import (
    COMPARISON_CSV_NAME,
    DIAGNOSTICS_REPORT_NAME,
    ESS_REPORT_NAME,
    GRADNORM_TRACE_NAME,
    HMC_DUMP_NAME,
    FROZEN_TARGET_NAME,
    HMC_SUMMARY_NAME,
    METRICS_CSV_NAME,
    VARIANCE_CSV_NAME,
)
from pathflow.utils.io_helpers import (
    load_checkpoint,
    load_samples,
    save_checkpoint,
    save_samples,
    write_csv,
    write_resolved_config,
    write_yaml,
)

logger = logging.getLogger(__name__)

BASELINE_ESTIMATORS = (EstimatorId.REP_QP, EstimatorId.REINF_PQ)


def banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def build_model_and_target(cfg: RunConfig) -> tuple[flow.FlowModel, Target]:
    """
    Initial flow from the `flow` section and the target it is trained on.

    A `self` target without a checkpoint freezes the initial flow itself
    (run_training stores that snapshot next to the run); with a checkpoint,
    training also starts from the frozen parameters.
    """
    arch = FlowArchitecture(T=cfg.target.T, **cfg.flow.model_dump())
    model = flow.FlowModel.initialize(arch, np.random.default_rng(cfg.flow.seed))
    if cfg.target.kind != "self":
        return model, build_target(cfg.target)
    if cfg.target.checkpoint is not None:
        frozen = load_checkpoint(cfg.target.checkpoint).model
        if frozen.T != cfg.target.T:
            raise UsageError(f"frozen flow has T={frozen.T}, config says T={cfg.target.T}")
        model = frozen.copy()
    else:
        frozen = model
    return model, build_target(cfg.target, frozen=frozen)


def target_from_header(header: dict | None, base_dir: str | Path = ".") -> Target:
    """
    Rebuild the target stored in a checkpoint header.

    A `self` target is rebuilt from its frozen snapshot; a relative snapshot
    path is looked up next to the checkpoint first.
    """
    if header is None:
        raise UsageError("checkpoint stores no target; pass --config")
    try:
        target_cfg = TargetConfig.model_validate(header)
    except ValueError as e:
        raise UsageError(f"checkpoint target section is not usable: {e}") from e
    frozen = None
    if target_cfg.kind == "self":
        if target_cfg.checkpoint is None:
            raise UsageError("checkpoint stores a self target without its frozen flow; pass --config")
        path = Path(target_cfg.checkpoint)
        if not path.is_absolute() and (Path(base_dir) / path).is_file():
            path = Path(base_dir) / path
        frozen = load_checkpoint(path).model
    return build_target(target_cfg, frozen=frozen)


# Pipelines
def run_training(cfg: RunConfig, resume: str | None = None) -> training.TrainResult:
    banner(f"TRAINING {cfg.train.estimator} on {cfg.target.kind} (T={cfg.target.T})")
    out_dir = Path(cfg.out_dir)
    write_resolved_config(cfg, out_dir)

    model, target = build_model_and_target(cfg)
    state = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.optimizer is None:
            raise UsageError(f"{resume} holds no optimizer state")
        state = training.TrainState.from_checkpoint(ckpt)
        print(f"Resuming from iteration {state.iteration}")
    print(f"Flow: {model.arch.n_layers} coupling layers, {model.n_params} parameters")

    target_header = cfg.target.model_dump(mode="json")
    if cfg.target.kind == "self" and cfg.target.checkpoint is None:
        save_checkpoint(out_dir / FROZEN_TARGET_NAME, target.frozen)
        target_header["checkpoint"] = FROZEN_TARGET_NAME

    result = training.train(model, target, cfg.train, out_dir=out_dir, workers=cfg.workers, state=state,
                            target_header=target_header)
    last = result.metrics.iloc[-1] if len(result.metrics) else None
    if last is not None:
        print(f"Finished ({result.stop_reason}) at iteration {int(last['iter'])}: "
              f"reverse ESS={last['reverse_ess']:.4f}, grad norm={last['grad_norm']:.3e}")
    print(f"Metrics written to {out_dir / METRICS_CSV_NAME}")
    return result


def run_hmc(cfg: RunConfig) -> sampling.HmcResult:
    banner(f"HMC on {cfg.target.kind} (T={cfg.target.T})")
    out_dir = Path(cfg.out_dir)
    write_resolved_config(cfg, out_dir)
    _, target = build_model_and_target(cfg)

    print(f"{cfg.hmc.n_chains} chains x {cfg.hmc.n_steps} steps (burn-in {cfg.hmc.burn_in})")
    result = sampling.hmc_sample(target, cfg.hmc, workers=cfg.workers)
    save_samples(out_dir / HMC_DUMP_NAME, result.samples)
    write_yaml(out_dir / HMC_SUMMARY_NAME, result.summary.model_dump(mode="json"))

    s = result.summary
    print(f"Acceptance rate: {s.acceptance_rate:.3f} (mirror {s.mirror_acceptance_rate:.3f})")
    print(f"Tuned step size: {s.tuned_step_size:.4g}, restarts: {s.restarts}")
    print(f"Well occupancy: {s.well_occupancy:.3f}")
    print(f"Samples written to {out_dir / HMC_DUMP_NAME}")
    return result


def run_eval(checkpoint: str, cfg: RunConfig, hmc_dump: str | None = None,
             n_q_samples: int | None = None, use_config_target: bool = False):
    banner(f"ESS EVALUATION of {checkpoint}")
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    if use_config_target:
        target = build_model_and_target(cfg)[1]
    else:
        target = target_from_header(ckpt.target, Path(checkpoint).parent)
    if target.T != model.T:
        raise UsageError(f"target has T={target.T}, flow has T={model.T}")

    p_samples = None
    hmc_dump = hmc_dump or cfg.eval.hmc_dump
    if hmc_dump is None:
        logger.warning("no target samples given; forward ESS skipped")
    else:
        p_samples = load_samples(hmc_dump)
        if p_samples.shape[1] != model.T:
            raise UsageError(f"sample dump has {p_samples.shape[1]} columns, flow has T={model.T}")

    n_q = n_q_samples if n_q_samples is not None else cfg.eval.n_q_samples
    report = sampling.evaluate_ess(model, target, n_q, q_seed=cfg.eval.seed, p_samples=p_samples,
                                   n_bootstrap=cfg.eval.n_bootstrap, collapse_ratio=cfg.eval.collapse_ratio)
    out_dir = Path(cfg.out_dir)
    write_resolved_config(cfg, out_dir)
    write_yaml(out_dir / ESS_REPORT_NAME, report.model_dump(mode="json"))

    print(f"Reverse ESS: {report.reverse_ess:.4f}  68% CI {report.reverse_interval}")
    if report.forward_ess is not None:
        print(f"Forward ESS: {report.forward_ess:.4f}  68% CI {report.forward_interval}")
        if report.mode_collapse:
            print("Warning: forward ESS far below reverse ESS, the flow looks mode-collapsed")
    print(f"Z estimate: {report.z_hat:.6g}")
    return report


def _compare_cell(cfg: RunConfig, estimator_id: EstimatorId, p_samples) -> tuple[dict, pd.DataFrame | None]:
    cell_cfg = cfg.model_copy(deep=True)
    cell_cfg.train.estimator = estimator_id
    cell_cfg.train.switch_rule = None
    if estimator_id in BASELINE_ESTIMATORS:
        cell_cfg.train.max_iters = int(round(cfg.train.max_iters * cfg.train.baseline_iter_factor))
    cell_cfg.out_dir = str(Path(cfg.out_dir) / str(estimator_id))

    row = {"estimator_id": str(estimator_id), "max_iters": cell_cfg.train.max_iters,
           "reverse_ess": np.nan, "reverse_low": np.nan, "reverse_high": np.nan,
           "forward_ess": np.nan, "forward_low": np.nan, "forward_high": np.nan,
           "status": "ok", "reason": ""}
    try:
        result = run_training(cell_cfg)
        _, target = build_model_and_target(cell_cfg)
        report = sampling.evaluate_ess(result.model, target, cfg.eval.n_q_samples, q_seed=cfg.eval.seed,
                                       p_samples=p_samples, n_bootstrap=cfg.eval.n_bootstrap,
                                       collapse_ratio=cfg.eval.collapse_ratio)
    except PathflowError as e:
        logger.warning("comparison cell %s failed: %s", estimator_id, e)
        row.update(status="failed", reason=f"{type(e).__name__}: {e}")
        return row, None
    row.update(reverse_ess=report.reverse_ess, reverse_low=report.reverse_interval[0],
               reverse_high=report.reverse_interval[1])
    if report.forward_ess is not None:
        row.update(forward_ess=report.forward_ess, forward_low=report.forward_interval[0],
                   forward_high=report.forward_interval[1])
    return row, result.metrics


def run_compare(cfg: RunConfig, estimator_ids: list[EstimatorId]) -> pd.DataFrame:
    """Train one flow per estimator and tabulate final ESS; baselines get a larger iteration budget."""
    if not estimator_ids:
        raise UsageError("no estimators to compare")
    banner(f"COMPARING {', '.join(map(str, estimator_ids))}")
    out_dir = Path(cfg.out_dir)
    write_resolved_config(cfg, out_dir)
    p_samples = load_samples(cfg.eval.hmc_dump) if cfg.eval.hmc_dump else None

    rows, frames = [], []
    for estimator_id in estimator_ids:
        print(f"\n--- {estimator_id} ---")
        row, metrics = _compare_cell(cfg, estimator_id, p_samples)
        rows.append(row)
        if metrics is not None:
            frames.append(metrics)

    table = pd.DataFrame(rows)
    write_csv(table, out_dir / COMPARISON_CSV_NAME)
    if frames:
        combined = training.write_metrics(pd.concat(frames, ignore_index=True), out_dir)
        diagnostics.gradnorm_trace(combined, out_dir / GRADNORM_TRACE_NAME)

    print("\nComparison:")
    print(table[["estimator_id", "reverse_ess", "forward_ess", "status"]].to_string(index=False))
    return table


def _affine_checks(cfg: RunConfig) -> dict:
    """Fisher-information limit and forward-KL bias on the 1-D Gaussian pair."""
    d = cfg.diagnostics
    oracle = diagnostics.affine_oracle_model(shift=0.0, log_scale=0.0)
    matched = gaussian_target([0.0], [1.0])
    fisher = diagnostics.affine_fisher_information(oracle)
    active = np.flatnonzero(fisher)
    grads, _ = diagnostics.replicate_gradients(EstimatorId.REINF_PQ, oracle, matched, d.batch_size,
                                               d.n_replicates, d.seed)
    observed = grads[:, active].var(axis=0, ddof=1) * d.batch_size

    mismatched = diagnostics.affine_oracle_model(shift=0.5, log_scale=np.log(1.3))
    bias = {}
    for estimator_id in (EstimatorId.PATH_PQ, EstimatorId.ZPATH_PQ):
        table = diagnostics.measure_bias(estimator_id, mismatched, matched, d.bias_batch_sizes,
                                         R=d.n_replicates, seed=d.seed)
        bias[str(estimator_id)] = table.to_dict(orient="list")
    return {
        "fisher_expected": fisher[active].tolist(),
        "fisher_observed_reinf_pq": observed.tolist(),
        "bias": bias,
    }


def run_diagnostics(cfg: RunConfig) -> dict:
    banner(f"DIAGNOSTICS on {cfg.target.kind} (T={cfg.target.T})")
    out_dir = Path(cfg.out_dir)
    write_resolved_config(cfg, out_dir)
    model, target = build_model_and_target(cfg)
    d = cfg.diagnostics
    report: dict = {"seed": d.seed, "model": model.arch.model_dump(mode="json"), "target": target.describe()}

    print("Measuring estimator variance...")
    rows = []
    for estimator_id in EstimatorId:
        try:
            v = diagnostics.measure_variance(estimator_id, model, target, d.batch_size, d.n_replicates,
                                             d.seed, workers=cfg.workers)
        except UsageError as e:
            logger.warning("variance of %s not measured: %s", estimator_id, e)
            rows.append({"estimator_id": str(estimator_id), "status": str(e)})
            continue
        rows.append({"estimator_id": str(estimator_id), "batch_size": v.batch_size,
                     "n_replicates": v.n_replicates, "norm_mean": v.norm_mean,
                     "norm_variance": v.norm_variance, "median_variance": float(np.median(v.variance)),
                     "failures": len(v.failures), "status": "ok"})
        print(f"  {estimator_id}: |grad| = {v.norm_mean:.3e}, median var = {np.median(v.variance):.3e}")
    write_csv(pd.DataFrame(rows), out_dir / VARIANCE_CSV_NAME)

    print("Probing the singular-weight regime...")
    spec = SingularRegimeSpec(N=d.singular_batch_size, epsilon=d.epsilon, seed=d.seed)
    try:
        report["singular_regime"] = diagnostics.singular_regime_probe(spec, model, target).model_dump()
    except ConstructionError as e:
        logger.warning("singular batch not constructed: %s", e)
        report["singular_regime"] = {"error": str(e), "achieved_ratio": e.achieved_ratio}
    except (NumericError, DegenerateWeights) as e:
        report["singular_regime"] = {"error": str(e)}

    print("Testing the score term mean...")
    score = diagnostics.score_zero_mean_test(model, max(d.batch_size * 10, 200), seed=d.seed)
    report["score_zero_mean"] = score._asdict()

    print("Checking Fisher information and bias on the Gaussian oracle...")
    report["affine_oracle"] = _affine_checks(cfg)

    write_yaml(out_dir / DIAGNOSTICS_REPORT_NAME, report)
    print(f"Report written to {out_dir / DIAGNOSTICS_REPORT_NAME}")
    return report
