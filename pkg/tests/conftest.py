import numpy as np
import pytest

from pathflow.core.diagnostics import affine_oracle_model
from pathflow.core.flow import FlowModel
from pathflow.core.schemas import FlowArchitecture
from pathflow.core.target import DoubleWellAction, gaussian_target, self_target


def make_arch(T=4, n_layers=4, hidden_layers=1, width=8, base_stddev=1.0, zero_init_final=False, **kwargs):
    return FlowArchitecture(T=T, n_layers=n_layers, hidden_layers=hidden_layers, width=width,
                            base_stddev=base_stddev, zero_init_final=zero_init_final, **kwargs)


def make_model(seed=0, **kwargs):
    return FlowModel.initialize(make_arch(**kwargs), np.random.default_rng(seed))


def central_difference(f, x, h=1e-6):
    """Gradient of a scalar function by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """Random (non-identity) T=4 flow with four coupling layers."""
    return make_model(seed=0)


@pytest.fixture
def identity_model():
    return FlowModel.initialize(make_arch(zero_init_final=True, base_stddev=10.0), np.random.default_rng(0))


@pytest.fixture
def double_well():
    return DoubleWellAction(8)


@pytest.fixture
def double_well_4():
    return DoubleWellAction(4)


@pytest.fixture
def self_pair(small_model):
    """A live flow and a target equal to a frozen copy of it."""
    return small_model, self_target(small_model)


@pytest.fixture
def gaussian_1d():
    return gaussian_target([0.0], [1.0])


@pytest.fixture
def matched_oracle():
    """1-D affine flow equal to N(0, 1)."""
    return affine_oracle_model(shift=0.0, log_scale=0.0)
