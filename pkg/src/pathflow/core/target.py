"""
Target densities p(x) = exp(-S(x)) / Z given by their action S.

Actions are written against the autodiff operations, so `action` runs on
plain arrays and `action_grad` gets dS/dx from a tape.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from pathflow.core import autodiff as ad
from pathflow.core import flow
from pathflow.core.errors import UsageError
from pathflow.core.schemas import TargetConfig


class Target(ABC):
    """Unnormalized target: only the action S is known."""

    normalized: bool = False

    @property
    @abstractmethod
    def T(self) -> int:
        """Dimension of a configuration."""

    @abstractmethod
    def action_pass(self, x):
        """S(x) per sample, on arrays or tape Vars."""

    @property
    def is_even(self) -> bool:
        """True when S(-x) = S(x) for every x."""
        return False

    def describe(self) -> dict:
        return {"kind": type(self).__name__}

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.T:
            raise UsageError(f"configuration has length {x.shape[-1]}, target expects {self.T}")
        return x

    def action(self, x: np.ndarray) -> np.ndarray:
        """S(x) for one configuration (T,) or a batch (N, T)."""
        return np.asarray(self.action_pass(self._check(x)))

    def action_grad(self, x: np.ndarray) -> np.ndarray:
        """dS/dx by reverse-mode differentiation."""
        x = self._check(x)
        tape = ad.Tape()
        xv = tape.variable(x)
        (grad,) = tape.backward(ad.sum_reduce(self.action_pass(xv)), [xv])
        return grad


def _shift_matrix(T: int) -> np.ndarray:
    """P with (x @ P)[t] = x[(t + 1) % T]."""
    P = np.zeros((T, T))
    P[(np.arange(T) + 1) % T, np.arange(T)] = 1.0
    return P


@dataclass(frozen=True)
class DoubleWellAction(Target):
    """
    Lattice action of a particle in a double-well potential, periodic in time:

        S(x) = a * sum_t ( m0/2 (x_{t+1} - x_t)^2 + V(x_t) ),
        V(x) = m0 mu2 / 2 x^2 + lam / 4 x^4
    """
    lattice_size: int
    a: float = 1.0
    m0: float = 2.75
    mu2: float = -1.0
    lam: float = 1.0
    _shift: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.lattice_size < 2:
            raise UsageError("double-well lattice needs T >= 2")
        if self.a <= 0 or self.lam < 0:
            raise UsageError("need a > 0 and lam >= 0")
        object.__setattr__(self, "_shift", _shift_matrix(self.lattice_size))

    @property
    def T(self) -> int:
        return self.lattice_size

    @property
    def is_even(self) -> bool:
        return True

    @property
    def minimum(self) -> float:
        """Positive minimum of V, sqrt(-m0 mu2 / lam); 0 when the potential has one well."""
        if self.lam == 0 or self.m0 * self.mu2 >= 0:
            return 0.0
        return float(np.sqrt(-self.m0 * self.mu2 / self.lam))

    def action_pass(self, x):
        hop = ad.sub(ad.dot(x, self._shift), x)
        kinetic = ad.mul(ad.square(hop), 0.5 * self.m0)
        x2 = ad.square(x)
        potential = ad.add(ad.mul(x2, 0.5 * self.m0 * self.mu2), ad.mul(ad.square(x2), 0.25 * self.lam))
        return ad.mul(ad.sum_reduce(ad.add(kinetic, potential), axis=-1), self.a)

    def describe(self) -> dict:
        return {"kind": "double_well", "T": self.T, "a": self.a, "m0": self.m0,
                "mu2": self.mu2, "lam": self.lam}


@dataclass(frozen=True, eq=False)
class GaussianTarget(Target):
    """S(x) = sum (x - mean)^2 / (2 stddev^2), normalization dropped."""
    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        stddev = np.broadcast_to(np.asarray(self.stddev, dtype=np.float64), mean.shape).copy()
        if np.any(stddev <= 0):
            raise UsageError("stddev must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", stddev)

    @property
    def T(self) -> int:
        return self.mean.shape[0]

    @property
    def is_even(self) -> bool:
        return bool(np.all(self.mean == 0))

    def action_pass(self, x):
        scaled = ad.mul(ad.sub(x, self.mean), 1.0 / self.stddev)
        return ad.mul(ad.sum_reduce(ad.square(scaled), axis=-1), 0.5)

    def describe(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "stddev": self.stddev.tolist()}


class SelfTarget(Target):
    """
    A frozen flow used as the target: S(x) = -log q_frozen(x).

    The frozen parameters enter as constants, so gradients reach x but never
    the parameters of a live model.
    """

    def __init__(self, frozen: flow.FlowModel):
        self.frozen = frozen
        self._params = frozen.unflatten()

    @property
    def T(self) -> int:
        return self.frozen.T

    def action_pass(self, x):
        return ad.neg(flow.log_prob_pass(self._params, self.frozen.arch, x))

    def describe(self) -> dict:
        return {"kind": "self", "architecture": self.frozen.arch.model_dump()}


def action(dw: Target, x: np.ndarray) -> np.ndarray:
    return dw.action(x)


def action_grad(dw: Target, x: np.ndarray) -> np.ndarray:
    return dw.action_grad(x)


def self_target(model_frozen: flow.FlowModel) -> SelfTarget:
    """Target whose action is -log q of a snapshot of the given flow."""
    return SelfTarget(model_frozen.copy())


def gaussian_target(mean, stddev) -> GaussianTarget:
    return GaussianTarget(mean=np.asarray(mean, dtype=np.float64), stddev=np.asarray(stddev, dtype=np.float64))


def build_target(cfg: TargetConfig, frozen: flow.FlowModel | None = None) -> Target:
    """
    Construct the target described by a config section.

    Args:
        cfg: Target section of the run config
        frozen: Flow snapshot used when cfg.kind == "self"

    Raises:
        UsageError: kind == "self" without a frozen model
    """
    if cfg.kind == "double_well":
        return DoubleWellAction(cfg.T, a=cfg.a, m0=cfg.m0, mu2=cfg.mu2, lam=cfg.lam)
    if cfg.kind == "gaussian":
        mean = np.broadcast_to(np.asarray(cfg.mean, dtype=np.float64), (cfg.T,))
        return gaussian_target(mean, np.broadcast_to(np.asarray(cfg.stddev, dtype=np.float64), (cfg.T,)))
    if frozen is None:
        raise UsageError("self target needs a frozen flow (target.checkpoint)")
    return self_target(frozen)
