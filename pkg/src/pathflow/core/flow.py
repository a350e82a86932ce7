"""
RealNVP normalizing flow on a 1-d periodic lattice.

Every coupling layer keeps the sites selected by its mask and transforms the
others with an affine map whose log-scale s and shift t come from two MLPs
fed with the masked input. Masks alternate even/odd sites between layers.

All passes are written against the operations in `pathflow.core.autodiff`,
so the same code runs on plain numpy arrays (no tape, no gradients) or on
tape Vars.
"""

from dataclasses import dataclass
from math import log, pi, sqrt

import numpy as np

from pathflow.core import autodiff as ad
from pathflow.core.errors import NumericError
from pathflow.core.schemas import FlowArchitecture


@dataclass(frozen=True, slots=True)
class ParamSlot:
    """Location of one weight/bias array inside the flat parameter vector."""
    name: str
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(slots=True)
class Batch:
    """N lattice configurations with their base samples and log-densities."""
    z: np.ndarray
    x: np.ndarray
    log_q: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def build_layout(arch: FlowArchitecture) -> list[ParamSlot]:
    """Flat parameter layout: layer -> net (scale, shift) -> dense layer -> weight, bias."""
    dims = [arch.T] + [arch.width] * arch.hidden_layers + [arch.T]
    slots, offset = [], 0
    for layer in range(arch.n_layers):
        for net in ("scale", "shift"):
            for k in range(len(dims) - 1):
                for kind, shape in (("weight", (dims[k + 1], dims[k])), ("bias", (dims[k + 1],))):
                    slot = ParamSlot(f"layer{layer}.{net}.{k}.{kind}", offset, shape)
                    slots.append(slot)
                    offset = slot.stop
    return slots


def coupling_mask(T: int, layer: int) -> np.ndarray:
    """1 on sites the layer passes through unchanged, 0 on transformed sites."""
    return ((np.arange(T) + layer) % 2 == 0).astype(np.float64)


class FlowModel:
    """
    Flow parameters theta plus the architecture that interprets them.

    The model is treated as immutable during evaluation; training replaces
    `theta` between batches only.
    """

    def __init__(self, arch: FlowArchitecture, theta: np.ndarray):
        self.arch = arch
        self.layout = build_layout(arch)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta has shape {theta.shape}, architecture needs ({self.n_params},)")
        self.theta = theta
        self.masks = [coupling_mask(arch.T, layer) for layer in range(arch.n_layers)]

    @classmethod
    def initialize(cls, arch: FlowArchitecture, rng: np.random.Generator | None = None) -> "FlowModel":
        """
        Fan-in scaled uniform initialization.

        Final layers of every scale/shift net are zeroed when
        `arch.zero_init_final` is set, so the flow starts at the identity.
        """
        rng = rng if rng is not None else np.random.default_rng(arch.seed)
        n_dense = arch.hidden_layers + 1
        theta = np.empty(sum(slot.size for slot in build_layout(arch)))
        for slot in build_layout(arch):
            fan_in = slot.shape[1] if len(slot.shape) == 2 else None
            dense_index = int(slot.name.split(".")[2])
            if fan_in is None:
                # bias: same fan-in as its weight
                fan_in = arch.T if dense_index == 0 else arch.width
            bound = 1.0 / sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=slot.size)
            if arch.zero_init_final and dense_index == n_dense - 1:
                values = np.zeros(slot.size)
            theta[slot.start:slot.stop] = values
        return cls(arch, theta)

    @property
    def n_params(self) -> int:
        return self.layout[-1].stop if self.layout else 0

    @property
    def T(self) -> int:
        return self.arch.T

    def unflatten(self, theta=None) -> list[np.ndarray]:
        """Split a flat vector into the per-slot arrays (views)."""
        theta = self.theta if theta is None else theta
        return [theta[s.start:s.stop].reshape(s.shape) for s in self.layout]

    @staticmethod
    def flatten(arrays) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])

    def copy(self) -> "FlowModel":
        """Deep snapshot."""
        return FlowModel(self.arch.model_copy(), self.theta.copy())

    def with_theta(self, theta: np.ndarray) -> "FlowModel":
        return FlowModel(self.arch, np.array(theta, dtype=np.float64))

    def slot(self, name: str) -> ParamSlot:
        for s in self.layout:
            if s.name == name:
                return s
        raise KeyError(name)

    def params_on_tape(self, tape: ad.Tape, requires_grad: bool = True) -> list[ad.Var]:
        return [tape.variable(a, requires_grad=requires_grad) for a in self.unflatten()]


# Generic passes: `params` is a list of arrays or Vars in layout order.
def _layer_nets(params, arch: FlowArchitecture, layer: int):
    per_net = 2 * (arch.hidden_layers + 1)
    start = layer * 2 * per_net
    return params[start:start + per_net], params[start + per_net:start + 2 * per_net]


def _mlp(net_params, h):
    n_dense = len(net_params) // 2
    for k in range(n_dense):
        h = ad.affine(h, net_params[2 * k], net_params[2 * k + 1])
        if k < n_dense - 1:
            h = ad.tanh(h)
    return h


def _scale_shift(params, arch, layer, mask, kept):
    scale_net, shift_net = _layer_nets(params, arch, layer)
    free = 1.0 - mask
    s = ad.mul(ad.tanh(_mlp(scale_net, kept)), arch.clamp * free)
    t = ad.mul(_mlp(shift_net, kept), free)
    return s, t


def forward_pass(params, arch: FlowArchitecture, z):
    """x = g(z) and log|dg/dz| per sample."""
    x, log_det = z, 0.0
    for layer in range(arch.n_layers):
        mask = coupling_mask(arch.T, layer)
        s, t = _scale_shift(params, arch, layer, mask, ad.mul(x, mask))
        x = ad.add(ad.mul(x, ad.exp(s)), t)
        log_det = ad.add(log_det, ad.sum_reduce(s, axis=-1))
    return x, log_det


def inverse_pass(params, arch: FlowArchitecture, x):
    """z = g^-1(x) and log|dg^-1/dx| per sample."""
    z, log_det_inv = x, 0.0
    for layer in reversed(range(arch.n_layers)):
        mask = coupling_mask(arch.T, layer)
        s, t = _scale_shift(params, arch, layer, mask, ad.mul(z, mask))
        z = ad.mul(ad.sub(z, t), ad.exp(ad.neg(s)))
        log_det_inv = ad.sub(log_det_inv, ad.sum_reduce(s, axis=-1))
    return z, log_det_inv


def base_log_prob_pass(arch: FlowArchitecture, z):
    sigma = arch.base_stddev
    norm = -0.5 * arch.T * log(2.0 * pi * sigma * sigma)
    return ad.add(ad.mul(ad.sum_reduce(ad.square(z), axis=-1), -0.5 / (sigma * sigma)), norm)


def log_prob_pass(params, arch: FlowArchitecture, x):
    z, log_det_inv = inverse_pass(params, arch, x)
    return ad.add(base_log_prob_pass(arch, z), log_det_inv)


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("flow produced a non-finite value")
    return arrays


# Public API (numpy in, numpy out)
def forward(model: FlowModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Push base samples through the flow.

    Args:
        model: Flow model
        z: Base sample(s), shape (T,) or (N, T)

    Returns:
        tuple: (x, log_det) with log_det = log|dg/dz|

    Raises:
        NumericError: On overflow
    """
    x, log_det = forward_pass(model.unflatten(), model.arch, np.asarray(z, dtype=np.float64))
    return _finite(np.asarray(x), np.asarray(log_det, dtype=np.float64))


def inverse(model: FlowModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse of `forward`; log_det_inv = -log_det at the preimage."""
    z, log_det_inv = inverse_pass(model.unflatten(), model.arch, np.asarray(x, dtype=np.float64))
    return _finite(np.asarray(z), np.asarray(log_det_inv, dtype=np.float64))


def base_log_prob(model: FlowModel, z: np.ndarray) -> np.ndarray:
    return np.asarray(base_log_prob_pass(model.arch, np.asarray(z, dtype=np.float64)))


def log_prob(model: FlowModel, x: np.ndarray) -> np.ndarray:
    """log q(x) = log q_Z(g^-1(x)) + log|dg^-1/dx|."""
    (value,) = _finite(np.asarray(log_prob_pass(model.unflatten(), model.arch,
                                                np.asarray(x, dtype=np.float64))))
    return value


def sample(model: FlowModel, n: int, rng: np.random.Generator) -> Batch:
    """Draw n samples x = g(z), z ~ q_Z, with log q(x) from the forward log-det."""
    z = rng.normal(0.0, model.arch.base_stddev, size=(n, model.T))
    x, log_det = forward(model, z)
    return Batch(z=z, x=x, log_q=base_log_prob(model, z) - log_det)


# Gradients over theta
def logq_x_gradient(model: FlowModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log q(x) and dlog q/dx per sample, with theta held constant."""
    tape = ad.Tape()
    xv = tape.variable(np.atleast_2d(x))
    logq = log_prob_pass(model.unflatten(), model.arch, xv)
    (grad,) = tape.backward(ad.sum_reduce(logq), [xv])
    return logq.value, grad


def contract_path(model: FlowModel, z: np.ndarray, x_adjoint: np.ndarray) -> np.ndarray:
    """
    d/dtheta of sum_i x_adjoint_i . g(z_i) with x_adjoint held fixed.

    This is the last step of the two-pass path gradient: one standard forward
    pass with gradients, contracted against a stopped cotangent.
    """
    tape = ad.Tape()
    params = model.params_on_tape(tape)
    x, _ = forward_pass(params, model.arch, np.atleast_2d(z))
    out = ad.sum_reduce(ad.mul(x, ad.stop_gradient(tape.constant(x_adjoint))))
    return FlowModel.flatten(tape.backward(out, params))


def path_grad_logq(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """
    Path gradient of log q_theta(g_theta(z)), averaged over the batch.

    Two passes with a stop-gradient:
        x' = forward(z) without gradients
        G  = dlog q(x')/dx' via the inverse pass
        return d/dtheta (stop_gradient(G) . forward(z))
    """
    z = np.atleast_2d(z)
    x_stopped, _ = forward(model, z)
    _, G = logq_x_gradient(model, x_stopped)
    return contract_path(model, z, G) / z.shape[0]


def score_grad_logq(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """d/dtheta log q_theta(x) at x = g(z) held fixed, averaged over the batch."""
    z = np.atleast_2d(z)
    x_fixed, _ = forward(model, z)
    tape = ad.Tape()
    params = model.params_on_tape(tape)
    logq = log_prob_pass(params, model.arch, tape.constant(x_fixed))
    return FlowModel.flatten(tape.backward(ad.sum_reduce(logq), params)) / z.shape[0]


def total_grad_logq(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """Total derivative d/dtheta log q_theta(g_theta(z)), averaged over the batch."""
    z = np.atleast_2d(z)
    tape = ad.Tape()
    params = model.params_on_tape(tape)
    _, log_det = forward_pass(params, model.arch, z)
    logq = ad.sub(base_log_prob_pass(model.arch, z), log_det)
    return FlowModel.flatten(tape.backward(ad.sum_reduce(logq), params)) / z.shape[0]
