import numpy as np
import pytest

from pathflow.core import flow, sampling
from pathflow.core.diagnostics import collapsed_model
from pathflow.core.errors import DegenerateWeights, UsageError
from pathflow.core.schemas import HmcConfig

from conftest import make_arch, make_model


class TestPartitionFunction:
    def test_unit_weights(self):
        assert sampling.z_hat(np.zeros(10)) == pytest.approx(1.0, rel=1e-15)

    def test_mean_of_weights(self):
        assert sampling.z_hat(np.log([2.0, 4.0])) == pytest.approx(3.0, rel=1e-14)

    def test_underflowing_weight(self):
        assert sampling.z_hat(np.array([-1000.0, 0.0])) == pytest.approx(0.5, rel=1e-14)

    def test_log_form_survives_huge_weights(self):
        assert sampling.log_z_hat(np.array([5000.0, 5000.0])) == pytest.approx(5000.0)

    def test_normalized_weights_sum_to_one(self, rng):
        w = sampling.normalized_weights(rng.normal(scale=50, size=100))
        assert w.sum() == pytest.approx(1.0, rel=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateWeights):
            sampling.z_hat(np.full(3, -np.inf))


class TestEss:
    def test_reverse_two_weights(self):
        assert sampling.reverse_ess(np.log([1.0, 3.0])) == pytest.approx(0.8, rel=1e-14)

    def test_reverse_equal_weights(self):
        assert sampling.reverse_ess(np.full(7, -2.5)) == pytest.approx(1.0, rel=1e-14)

    def test_reverse_one_dominant_weight(self):
        assert sampling.reverse_ess(np.array([0.0, -1000.0, -1000.0, -1000.0])) == pytest.approx(0.25)

    def test_reverse_is_shift_invariant(self, rng):
        lw = rng.normal(size=50)
        assert sampling.reverse_ess(lw + 123.0) == pytest.approx(sampling.reverse_ess(lw), rel=1e-12)

    def test_reverse_needs_two_weights(self):
        with pytest.raises(UsageError):
            sampling.reverse_ess(np.zeros(1))

    def test_forward(self):
        assert sampling.forward_ess(np.log([0.5, 1.5]), 1.0) == pytest.approx(1.0, rel=1e-14)

    def test_forward_rejects_bad_z(self):
        with pytest.raises(DegenerateWeights):
            sampling.forward_ess(np.zeros(3), 0.0)

    def test_bootstrap_interval(self, rng):
        values = rng.normal(size=400)
        low, high = sampling.bootstrap_ess_interval(values, np.mean, n_resamples=200, seed=3)
        assert low < np.mean(values) < high
        assert (low, high) == sampling.bootstrap_ess_interval(values, np.mean, n_resamples=200, seed=3)


class TestEvaluateEss:
    def test_self_target(self, self_pair, rng):
        model, target = self_pair
        p_samples = flow.sample(model, 2000, rng).x
        report = sampling.evaluate_ess(model, target, 2000, q_seed=5, p_samples=p_samples, n_bootstrap=20)
        assert report.reverse_ess == pytest.approx(1.0, abs=1e-9)
        assert report.forward_ess == pytest.approx(1.0, abs=1e-9)
        assert report.z_seed == 6
        assert report.mode_collapse is False

    def test_reverse_only(self, small_model, double_well_4):
        report = sampling.evaluate_ess(small_model, double_well_4, 500, q_seed=1, n_bootstrap=20)
        assert 0 < report.reverse_ess <= 1
        assert report.forward_ess is None and report.mode_collapse is None
        low, high = report.reverse_interval
        assert low <= high

    def test_flags_a_collapsed_flow(self, double_well_4, rng):
        arch = make_arch(T=4, n_layers=2, hidden_layers=1, width=4)
        model = collapsed_model(arch, center=double_well_4.minimum, stddev=0.4)
        signs = np.where(rng.uniform(size=(2000, 1)) < 0.5, 1.0, -1.0)
        p_samples = signs * double_well_4.minimum + rng.normal(scale=0.4, size=(2000, 4))
        report = sampling.evaluate_ess(model, double_well_4, 4000, q_seed=2, p_samples=p_samples, n_bootstrap=20)
        assert report.forward_ess < 0.6 * report.reverse_ess
        assert report.mode_collapse is True

    def test_needs_two_samples(self, small_model, double_well_4):
        with pytest.raises(UsageError):
            sampling.evaluate_ess(small_model, double_well_4, 1, q_seed=0)


class TestNis:
    def test_constant_observable(self, small_model, double_well_4, rng):
        mean, stderr = sampling.nis_estimate(small_model, double_well_4, lambda x: np.ones(len(x)), 256, rng)
        assert mean == 1.0
        assert stderr == 0.0

    def test_gaussian_mean(self, gaussian_1d, rng):
        model = make_model(T=1, n_layers=2, zero_init_final=True, base_stddev=1.5)
        mean, stderr = sampling.nis_estimate(model, gaussian_1d, lambda x: x[:, 0], 20_000, rng)
        assert stderr > 0
        assert abs(mean) <= 5 * stderr


class TestLeapfrog:
    def test_reversible(self, double_well_4, rng):
        x0, p0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x1, p1 = sampling.leapfrog(double_well_4, x0, p0, 0.05, 20)
        x2, p2 = sampling.leapfrog(double_well_4, x1, -p1, 0.05, 20)
        np.testing.assert_allclose(x2, x0, atol=1e-10)
        np.testing.assert_allclose(-p2, p0, atol=1e-10)

    def test_small_steps_conserve_energy(self, double_well_4, rng):
        x0, p0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x1, p1 = sampling.leapfrog(double_well_4, x0, p0, 1e-4, 10)
        np.testing.assert_allclose(sampling.hamiltonian(double_well_4, x1, p1),
                                   sampling.hamiltonian(double_well_4, x0, p0), atol=1e-7)

    def test_per_chain_step_sizes(self, gaussian_1d):
        x, p = np.array([[1.0], [1.0]]), np.zeros((2, 1))
        x1, _ = sampling.leapfrog(gaussian_1d, x, p, np.array([[0.1], [0.2]]), 1)
        np.testing.assert_allclose(x1[:, 0], [1 - 0.5 * 0.1 ** 2, 1 - 0.5 * 0.2 ** 2])


class TestHmc:
    def test_well_occupancy(self):
        assert sampling.well_occupancy(np.array([[1.0, 1.0], [-1.0, -2.0], [3.0, -1.0], [0.5, 0.5]])) == 0.75

    def test_mirror_moves_always_accepted_for_even_actions(self, double_well_4):
        cfg = HmcConfig(n_chains=2, n_steps=40, burn_in=10, overrelax_freq=5, progress=False)
        result = sampling.hmc_sample(double_well_4, cfg, seed=1)
        assert result.summary.mirror_acceptance_rate == 1.0
        assert result.samples.shape == (80, 4)
        assert result.summary.n_samples == 80

    def test_deterministic_and_worker_independent(self, gaussian_1d):
        cfg = HmcConfig(n_chains=4, n_steps=30, burn_in=10, step_size=0.3, progress=False)
        a = sampling.hmc_sample(gaussian_1d, cfg, seed=9)
        b = sampling.hmc_sample(gaussian_1d, cfg, seed=9)
        c = sampling.hmc_sample(gaussian_1d, cfg, seed=9, workers=2)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.samples, c.samples)

    @pytest.mark.slow
    def test_gaussian_moments(self, gaussian_1d):
        cfg = HmcConfig(n_chains=8, n_steps=3000, burn_in=500, step_size=0.5, n_leapfrog=5, progress=False)
        samples = sampling.hmc_sample(gaussian_1d, cfg, seed=4).samples[:, 0]
        assert abs(samples.mean()) < 0.1
        assert samples.var() == pytest.approx(1.0, abs=0.1)

    @pytest.mark.slow
    def test_double_well_is_balanced(self, double_well):
        cfg = HmcConfig(n_chains=4, n_steps=2000, burn_in=200, progress=False)
        result = sampling.hmc_sample(double_well, cfg, seed=2)
        assert result.summary.well_occupancy == pytest.approx(0.5, abs=0.02)
        assert result.summary.restarts == 0
