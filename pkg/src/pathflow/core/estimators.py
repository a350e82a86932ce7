"""
Gradient estimators of the reverse KL(q||p) and forward KL(p||q).

Every estimator returns the gradient of a divergence with respect to the
flat flow parameters, to be descended. All of them work from one batch of
base samples z ~ q_Z; the forward-KL estimators reweight that batch with
self-normalized importance weights.

Path estimators never form a per-sample parameter Jacobian: they compute the
configuration-space gradient G_i = d(S + log q)/dx at x_i = g(z_i) once,
scale it by a per-sample coefficient and contract it through one forward
pass with gradients.

    PathQP   coefficient 1/N
    PathPQ   coefficient w_i           (self-normalized weight)
    ZPathPQ  coefficient w_i (1 - w_i)
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp

from pathflow.core import autodiff as ad
from pathflow.core import flow
from pathflow.core.errors import DegenerateWeights, UsageError
from pathflow.core.schemas import EstimatorId
from pathflow.core.target import Target

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientEstimate:
    """One gradient estimate over a batch."""
    estimator_id: EstimatorId
    grad: np.ndarray
    batch_size: int
    loss: float
    log_wtilde: np.ndarray
    per_sample_weights: np.ndarray | None = None

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


@dataclass(frozen=True)
class WeightSet:
    """Log unnormalized weights of a batch with their self-normalized form."""
    log_wtilde: np.ndarray
    normalized: np.ndarray
    log_z_hat: float

    @property
    def ess(self) -> float:
        """Reverse ESS per sample, 1 / (N sum w^2)."""
        return float(1.0 / (len(self.normalized) * np.sum(self.normalized ** 2)))


def log_weights(model: flow.FlowModel, target: Target, z: np.ndarray) -> WeightSet:
    """
    log w_i = -S(x_i) - log q(x_i) at x_i = g(z_i), self-normalized in log space.

    Raises:
        DegenerateWeights: Every weight is zero or some weight is NaN
    """
    x, log_det = flow.forward(model, z)
    lw = -target.action(x) - (flow.base_log_prob(model, z) - log_det)
    return weight_set(lw)


def weight_set(log_wtilde: np.ndarray) -> WeightSet:
    lw = np.asarray(log_wtilde, dtype=np.float64)
    if np.any(np.isnan(lw)) or not np.any(np.isfinite(lw)):
        raise DegenerateWeights("all importance weights are zero or NaN")
    total = logsumexp(lw)
    return WeightSet(log_wtilde=lw, normalized=np.exp(lw - total), log_z_hat=float(total - np.log(lw.size)))


def forward_kl_coefficients(log_wtilde: np.ndarray, estimator_id: EstimatorId) -> np.ndarray:
    """
    Per-sample path coefficients of the forward-KL estimators.

    ZPathPQ scales each weight by 1 - w_i, computed as -expm1(log w_i) so it
    stays accurate when w_i is close to one.
    """
    ws = weight_set(log_wtilde)
    if estimator_id == EstimatorId.PATH_PQ:
        return ws.normalized
    if estimator_id == EstimatorId.ZPATH_PQ:
        log_w = ws.log_wtilde - logsumexp(ws.log_wtilde)
        return ws.normalized * -np.expm1(log_w)
    raise UsageError(f"{estimator_id} has no forward-KL path coefficients")


# Shard workers (module level so joblib can ship them to processes)
def config_gradient(model: flow.FlowModel, target: Target, z: np.ndarray):
    """x = g(z), log w and G = d(S + log q)/dx for one shard."""
    x, log_det = flow.forward(model, z)
    _, dlogq = flow.logq_x_gradient(model, x)
    lw = -target.action(x) - (flow.base_log_prob(model, z) - log_det)
    return x, lw, target.action_grad(x) + dlogq


def _contract_shard(model: flow.FlowModel, z: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
    return flow.contract_path(model, z, adjoint)


def _reparam_shard(model: flow.FlowModel, target: Target, z: np.ndarray, scale: float):
    """Gradient of scale * sum(S(g(z)) - log_det) and the shard's log weights from the same pass."""
    tape = ad.Tape()
    params = model.params_on_tape(tape)
    x, log_det = flow.forward_pass(params, model.arch, z)
    action = target.action_pass(x)
    objective = ad.mul(ad.sum_reduce(ad.sub(action, log_det)), scale)
    lw = -action.value - (flow.base_log_prob(model, z) - log_det.value)
    return flow.FlowModel.flatten(tape.backward(objective, params)), lw


def _weighted_score_shard(model: flow.FlowModel, x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """d/dtheta sum_i c_i log q_theta(x_i) with x held fixed."""
    tape = ad.Tape()
    params = model.params_on_tape(tape)
    log_q = flow.log_prob_pass(params, model.arch, tape.constant(x))
    return flow.FlowModel.flatten(tape.backward(ad.sum_reduce(ad.mul(log_q, coeffs)), params))


def _shards(n: int, workers: int) -> list[slice]:
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


def _map_shards(fn: Callable, args_per_shard: list[tuple], workers: int) -> list:
    if workers <= 1 or len(args_per_shard) == 1:
        return [fn(*args) for args in args_per_shard]
    return Parallel(n_jobs=workers)(delayed(fn)(*args) for args in args_per_shard)


def _sum_in_order(parts: list[np.ndarray]) -> np.ndarray:
    total = parts[0].copy()
    for part in parts[1:]:
        total += part
    return total


def _config_pass(model, target, z, shards, workers):
    results = _map_shards(config_gradient, [(model, target, z[s]) for s in shards], workers)
    return tuple(np.concatenate(col) for col in zip(*results))


# Estimators
def _path_estimate(estimator_id: EstimatorId, model: flow.FlowModel, target: Target,
                   z: np.ndarray, workers: int) -> GradientEstimate:
    N = z.shape[0]
    shards = _shards(N, workers)
    _, lw, G = _config_pass(model, target, z, shards, workers)
    if estimator_id == EstimatorId.PATH_QP:
        coeffs = np.full(N, 1.0 / N)
        loss, weights = float(-np.mean(lw)), None
    else:
        coeffs = forward_kl_coefficients(lw, estimator_id)
        ws = weight_set(lw)
        loss, weights = _forward_kl_surrogate(ws), ws.normalized
    adjoint = coeffs[:, None] * G
    grad = _sum_in_order(_map_shards(_contract_shard, [(model, z[s], adjoint[s]) for s in shards], workers))
    return GradientEstimate(estimator_id, grad, N, loss, lw, weights)


def _forward_kl_surrogate(ws: WeightSet) -> float:
    """Self-normalized estimate of KL(p||q) up to the constant of S."""
    finite = ws.normalized > 0
    return float(np.sum(ws.normalized[finite] * ws.log_wtilde[finite]) - ws.log_z_hat)


def path_qp(model: flow.FlowModel, target: Target, z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """Path gradient of the reverse KL: the score term, zero in expectation, is dropped."""
    return _path_estimate(EstimatorId.PATH_QP, model, target, _batch(z), workers)


def path_pq(model: flow.FlowModel, target: Target, z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """Path gradient of the forward KL from reweighted flow samples."""
    return _path_estimate(EstimatorId.PATH_PQ, model, target, _batch(z, minimum=2), workers)


def zpath_pq(model: flow.FlowModel, target: Target, z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """
    PathPQ with the partition-function estimate differentiated as well.

    Each weight is damped by (1 - w_i): a batch dominated by one sample
    contributes a gradient near zero instead of that sample's full path term.
    """
    return _path_estimate(EstimatorId.ZPATH_PQ, model, target, _batch(z, minimum=2), workers)


def rep_qp(model: flow.FlowModel, target: Target, z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """Reparameterization gradient of mean(S(g(z)) + log q(g(z))) (score term kept)."""
    z = _batch(z)
    N = z.shape[0]
    shards = _shards(N, workers)
    parts = _map_shards(_reparam_shard, [(model, target, z[s], 1.0 / N) for s in shards], workers)
    grad = _sum_in_order([grad for grad, _ in parts])
    ws = weight_set(np.concatenate([lw for _, lw in parts]))
    return GradientEstimate(EstimatorId.REP_QP, grad, N, float(-np.mean(ws.log_wtilde)), ws.log_wtilde)


def score_qp(model: flow.FlowModel, target: Target, z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """Mean score d/dtheta log q_theta(x) at stopped x; zero in expectation."""
    z = _batch(z)
    N = z.shape[0]
    shards = _shards(N, workers)
    x, _ = flow.forward(model, z)
    coeffs = np.full(N, 1.0 / N)
    grad = _sum_in_order(_map_shards(_weighted_score_shard,
                                     [(model, x[s], coeffs[s]) for s in shards], workers))
    ws = log_weights(model, target, z)
    return GradientEstimate(EstimatorId.SCORE, grad, N, float(-np.mean(ws.log_wtilde)), ws.log_wtilde)


def reinf_pq(model: flow.FlowModel, target: Target, z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """Weighted-score (REINFORCE) gradient of the forward KL: -sum_i w_i score_i."""
    z = _batch(z, minimum=2)
    N = z.shape[0]
    shards = _shards(N, workers)
    x, _ = flow.forward(model, z)
    ws = log_weights(model, target, z)
    coeffs = -ws.normalized
    grad = _sum_in_order(_map_shards(_weighted_score_shard,
                                     [(model, x[s], coeffs[s]) for s in shards], workers))
    return GradientEstimate(EstimatorId.REINF_PQ, grad, N, _forward_kl_surrogate(ws),
                            ws.log_wtilde, ws.normalized)


def _batch(z: np.ndarray, minimum: int = 1) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] < minimum:
        # self-normalized weights of a single sample carry no information
        raise UsageError(f"batch of {z.shape[0]} sample(s), need at least {minimum}")
    return z


ESTIMATORS: dict[EstimatorId, Callable[..., GradientEstimate]] = {
    EstimatorId.REP_QP: rep_qp,
    EstimatorId.PATH_QP: path_qp,
    EstimatorId.SCORE: score_qp,
    EstimatorId.REINF_PQ: reinf_pq,
    EstimatorId.PATH_PQ: path_pq,
    EstimatorId.ZPATH_PQ: zpath_pq,
}


def evaluate(estimator_id: EstimatorId | str, model: flow.FlowModel, target: Target,
             z: np.ndarray, workers: int = 1) -> GradientEstimate:
    """
    Run the named estimator on a batch of base samples.

    With workers > 1 the batch is split into contiguous shards whose partial
    gradients are summed in shard order, so a given worker count always
    reproduces the same bits.

    Raises:
        UsageError: Unknown estimator, empty batch or shape mismatch
        DegenerateWeights: Forward-KL estimator on a batch with no usable weight
    """
    try:
        estimator_id = EstimatorId(estimator_id)
    except ValueError as e:
        raise UsageError(f"unknown estimator '{estimator_id}'") from e
    z = _batch(z)
    if z.shape[1] != model.T:
        raise UsageError(f"batch has dimension {z.shape[1]}, flow expects {model.T}")
    return ESTIMATORS[estimator_id](model, target, z, workers=workers)
