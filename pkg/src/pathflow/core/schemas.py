import sys
from enum import Enum

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:  # Python 3.10 compatibility: mirror enum.StrEnum's str()/format() behavior
    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class EstimatorId(StrEnum):
    """Gradient estimators of the reverse (qp) and forward (pq) KL divergence."""
    REP_QP = "RepQP"
    PATH_QP = "PathQP"
    SCORE = "Score"
    REINF_PQ = "ReinfPQ"
    PATH_PQ = "PathPQ"
    ZPATH_PQ = "ZPathPQ"

    @property
    def is_forward(self) -> bool:
        return self in (EstimatorId.REINF_PQ, EstimatorId.PATH_PQ, EstimatorId.ZPATH_PQ)

    @property
    def is_path(self) -> bool:
        return self in (EstimatorId.PATH_QP, EstimatorId.PATH_PQ, EstimatorId.ZPATH_PQ)


TRAINABLE_ESTIMATORS = (
    EstimatorId.REP_QP, EstimatorId.PATH_QP,
    EstimatorId.REINF_PQ, EstimatorId.PATH_PQ, EstimatorId.ZPATH_PQ,
)


class StrictModel(BaseModel):
    """Config base: unknown keys are errors."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# Configuration sections
class TargetConfig(StrictModel):
    """Target density parameters."""
    kind: Literal["double_well", "gaussian", "self"] = Field(default="double_well",
                                                             description="Target family")
    T: int = Field(default=8, ge=1, description="Lattice size / dimension")
    a: float = Field(default=1.0, gt=0, description="Lattice spacing")
    m0: float = Field(default=2.75, description="Mass m0")
    mu2: float = Field(default=-1.0, description="Mass parameter mu^2")
    lam: float = Field(default=1.0, ge=0, description="Quartic coupling lambda")
    mean: float | list[float] = Field(default=0.0, description="Gaussian target mean")
    stddev: float | list[float] = Field(default=1.0, description="Gaussian target stddev")
    checkpoint: str | None = Field(default=None, description="Frozen flow for kind=self")

    @model_validator(mode="after")
    def _check_lattice(self):
        if self.kind == "double_well" and self.T < 2:
            raise ValueError("double_well needs T >= 2")
        return self


class FlowConfig(StrictModel):
    """RealNVP architecture (everything except the lattice size)."""
    n_layers: int = Field(default=6, ge=1, description="Number of coupling layers")
    hidden_layers: int = Field(default=3, ge=0, description="Hidden layers per scale/shift net")
    width: int = Field(default=64, ge=1, description="Hidden layer width")
    base_stddev: float = Field(default=10.0, gt=0, description="Base Gaussian stddev")
    clamp: float = Field(default=5.0, gt=0, description="Scale bound: s = clamp * tanh(net)")
    zero_init_final: bool = Field(default=True, description="Start the flow at the identity")
    seed: int | None = Field(default=None, description="Initialization seed")


class FlowArchitecture(FlowConfig):
    """Full architecture descriptor stored in checkpoint headers."""
    T: int = Field(ge=1, description="Lattice size")


class SwitchRule(StrictModel):
    """Train with `start_estimator` until `switch_at_iter`, then with the configured one."""
    start_estimator: EstimatorId
    switch_at_iter: int = Field(ge=0)


class TrainConfig(StrictModel):
    """Optimizer, schedule and loop settings."""
    estimator: EstimatorId = Field(default=EstimatorId.PATH_QP, description="Gradient estimator")
    batch_size: int = Field(default=512, ge=2, description="Samples per gradient estimate")
    max_iters: int = Field(default=5000, ge=1, description="Iteration budget")
    lr0: float = Field(default=1e-3, gt=0, description="Initial learning rate")
    betas: tuple[float, float] = Field(default=(0.9, 0.999), description="Adam betas")
    adam_eps: float = Field(default=1e-8, gt=0, description="Adam epsilon")
    plateau_patience: int = Field(default=500, ge=1, description="Schedule steps without improvement")
    lr_min: float = Field(default=1e-7, gt=0, description="Learning rate floor")
    lr_factor: float = Field(default=0.5, gt=0, lt=1, description="Plateau decay factor")
    seed: int | None = Field(default=None, description="Training seed")
    eval_every: int = Field(default=500, ge=1, description="Held-out evaluation/checkpoint period")
    eval_batch_size: int = Field(default=4096, ge=2, description="Held-out ESS batch size")
    log_every: int = Field(default=10, ge=1, description="Metrics row period")
    switch_rule: SwitchRule | None = Field(default=None, description="Optional estimator switch")
    max_walltime_s: float | None = Field(default=None, gt=0, description="Walltime budget")
    baseline_iter_factor: float = Field(default=2.0, gt=0,
                                        description="Iteration multiplier for baselines in comparisons")
    max_consecutive_failures: int = Field(default=10, ge=1, description="Abort threshold")
    progress: bool = Field(default=True, description="Show a progress bar")

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        return self


class HmcConfig(StrictModel):
    """Overrelaxed HMC ground-truth sampler."""
    n_chains: int = Field(default=10, ge=1)
    n_steps: int = Field(default=10000, ge=1, description="Kept steps per chain")
    n_leapfrog: int = Field(default=10, ge=1, description="Leapfrog sub-steps per proposal")
    step_size: float = Field(default=0.05, gt=0, description="Initial leapfrog step size")
    overrelax_freq: int = Field(default=10, ge=1, description="Mirror x -> -x every k-th step")
    burn_in: int = Field(default=1000, ge=1, description="Discarded equilibration steps")
    target_accept: float = Field(default=0.7, gt=0, lt=1, description="Step-size tuning target")
    adapt_step_size: bool = Field(default=True)
    seed: int | None = Field(default=None)
    progress: bool = Field(default=True)


class EvalConfig(StrictModel):
    """ESS evaluation settings."""
    n_q_samples: int = Field(default=100_000, ge=2, description="Flow samples for reverse ESS / Z")
    n_bootstrap: int = Field(default=1000, ge=1, description="Bootstrap resamples")
    collapse_ratio: float = Field(default=0.6, gt=0, le=1, description="forward < ratio*reverse flags collapse")
    hmc_dump: str | None = Field(default=None, description="Sample dump of target draws")
    seed: int | None = Field(default=None)


class DiagnosticsConfig(StrictModel):
    """Oracle-backed diagnostics settings."""
    batch_size: int = Field(default=1024, ge=2)
    n_replicates: int = Field(default=200, ge=30)
    epsilon: float = Field(default=1e-8, gt=0, le=1e-6)
    singular_batch_size: int = Field(default=64, ge=2)
    bias_batch_sizes: list[int] = Field(default=[64, 128, 256, 512])
    seed: int | None = Field(default=None)


class RunConfig(StrictModel):
    """Complete run configuration (one YAML document)."""
    target: TargetConfig = Field(default_factory=TargetConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    hmc: HmcConfig = Field(default_factory=HmcConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    out_dir: str = Field(default="runs/default", description="Output directory")
    seed: int | None = Field(default=None, description="Master seed")
    workers: int = Field(default=1, ge=1, description="Parallel workers")


# Reports
class EssReport(BaseModel):
    """Forward and reverse effective sample size estimates."""
    reverse_ess: float = Field(ge=0, description="Reverse ESS from flow samples")
    reverse_interval: tuple[float, float] | None = Field(default=None, description="Bootstrap 68% interval")
    forward_ess: float | None = Field(default=None, ge=0, description="Forward ESS from target samples")
    forward_interval: tuple[float, float] | None = Field(default=None)
    z_hat: float = Field(ge=0, description="Partition function estimate")
    log_z_hat: float = Field(description="log of z_hat")
    n_q_samples: int = Field(ge=1)
    n_p_samples: int | None = Field(default=None)
    q_seed: int | None = Field(default=None, description="Seed of the reverse ESS batch")
    z_seed: int | None = Field(default=None, description="Seed of the independent Z batch")
    mode_collapse: bool | None = Field(default=None, description="forward ESS < ratio * reverse ESS")


class MetricsRow(BaseModel):
    """One logged training iteration."""
    iter: int
    wall_ms: float
    loss_surrogate: float
    grad_norm: float
    reverse_ess: float
    lr: float
    estimator_id: EstimatorId
    skipped: int = 0
    switched: int = 0


class HmcSummary(BaseModel):
    """Run statistics of an HMC sampling run."""
    n_samples: int
    n_chains: int
    acceptance_rate: float
    mirror_acceptance_rate: float
    tuned_step_size: float
    restarts: int
    well_occupancy: float = Field(description="Fraction of samples with mean(x) > 0")
    seed: int


class VarianceReport(BaseModel):
    """Componentwise mean/variance of an estimator over R batch replicates."""
    estimator_id: EstimatorId
    batch_size: int
    n_replicates: int = Field(ge=30)
    mean: list[float]
    variance: list[float]
    norm_mean: float
    norm_variance: float
    seed: int
    failures: list[dict] = Field(default_factory=list, description="Replicate index and reason")
    model: dict = Field(default_factory=dict)
    target: dict = Field(default_factory=dict)


class SingularRegimeSpec(BaseModel):
    """One sample at a target mode, N-1 samples far in the tail."""
    N: int = Field(ge=2)
    epsilon: float = Field(gt=0, le=1e-6)
    seed: int = 0
    max_attempts: int = Field(default=60, ge=1)


class SingularRegimeReport(BaseModel):
    """Gradient norms and directions on a constructed singular-weight batch."""
    norm_pathpq: float
    norm_zpathpq: float
    norm_pathqp: float
    ratio_zpath_to_path: float
    cosine_pathpq_singular: float
    cosine_pathpq_pathqp: float
    achieved_ratio: float
    tail_radius: float
