import numpy as np
import pytest

from pathflow.core import training
from pathflow.core.errors import NumericError, TrainingAborted
from pathflow.core.schemas import EstimatorId, SwitchRule, TrainConfig
from pathflow.core.target import DoubleWellAction, Target, gaussian_target
from pathflow.utils.constants import CHECKPOINT_NAME, METRICS_CSV_NAME, TIMING_CSV_NAME
from pathflow.utils.io_helpers import load_checkpoint, read_csv

from conftest import make_model


def quick_config(**kwargs):
    defaults = dict(batch_size=32, max_iters=20, eval_every=5, eval_batch_size=64,
                    log_every=1, progress=False, seed=11)
    return TrainConfig(**{**defaults, **kwargs})


class BrokenTarget(Target):
    """Every evaluation overflows."""

    @property
    def T(self) -> int:
        return 4

    def action_pass(self, x):
        raise NumericError("overflow in action")


class TestAdam:
    def test_zero_gradient_leaves_parameters(self, small_model):
        cfg = quick_config()
        state = training.TrainState.initial(small_model, cfg)
        after = training.adam_step(state, np.zeros(small_model.n_params), cfg)
        assert np.array_equal(after.theta, state.theta)
        assert after.step == 1

    def test_first_step_moves_by_lr(self):
        model = make_model(T=2, n_layers=1, hidden_layers=0)
        cfg = quick_config(lr0=1e-2)
        state = training.TrainState.initial(model, cfg)
        grad = np.where(np.arange(model.n_params) % 2 == 0, 2.0, -3.0)
        after = training.adam_step(state, grad, cfg)
        np.testing.assert_allclose(after.theta - state.theta, -1e-2 * np.sign(grad), rtol=1e-6)

    def test_non_finite_gradient_is_skipped(self, small_model):
        cfg = quick_config()
        state = training.TrainState.initial(small_model, cfg)
        grad = np.zeros(small_model.n_params)
        grad[3] = np.nan
        after = training.adam_step(state, grad, cfg)
        assert after.skip_count == 1 and after.step == 0
        assert np.array_equal(after.theta, state.theta)


class TestSchedule:
    def test_halves_after_patience(self, small_model):
        cfg = quick_config(lr0=1e-3, plateau_patience=2)
        state = training.plateau_schedule(training.TrainState.initial(small_model, cfg), 1.0, cfg)
        state = training.plateau_schedule(state, 2.0, cfg)
        assert state.lr == 1e-3
        state = training.plateau_schedule(state, 2.0, cfg)
        assert state.lr == pytest.approx(5e-4)
        assert state.plateau_counter == 0

    def test_improvement_resets_counter(self, small_model):
        cfg = quick_config(plateau_patience=3)
        state = training.TrainState.initial(small_model, cfg)
        for loss in (5.0, 6.0, 6.0, 4.0):
            state = training.plateau_schedule(state, loss, cfg)
        assert state.plateau_counter == 0 and state.best_loss == 4.0

    def test_floor(self, small_model):
        cfg = quick_config(lr0=1e-3, lr_min=4e-4, plateau_patience=1)
        state = training.TrainState.initial(small_model, cfg)
        for _ in range(5):
            state = training.plateau_schedule(state, np.inf, cfg)
        assert state.lr == 4e-4

    def test_active_estimator(self):
        cfg = quick_config(estimator="PathPQ",
                           switch_rule=SwitchRule(start_estimator="PathQP", switch_at_iter=3))
        assert [training.active_estimator(cfg, i) for i in (0, 2, 3, 9)] == [
            EstimatorId.PATH_QP, EstimatorId.PATH_QP, EstimatorId.PATH_PQ, EstimatorId.PATH_PQ]


class TestTrain:
    def test_self_target_gradient_vanishes(self, self_pair):
        model, target = self_pair
        result = training.train(model, target, quick_config(max_iters=10))
        assert result.metrics["grad_norm"].max() <= 1e-8
        np.testing.assert_allclose(result.metrics["reverse_ess"], 1.0, atol=1e-9)

    def test_improves_on_a_gaussian(self):
        model = make_model(T=2, n_layers=2, hidden_layers=0, zero_init_final=True, base_stddev=3.0)
        target = gaussian_target([0.0, 0.0], [1.0, 1.0])
        result = training.train(model, target, quick_config(max_iters=300, lr0=1e-2, batch_size=128, eval_every=50))
        first, last = result.metrics["reverse_ess"].iloc[0], result.metrics["reverse_ess"].iloc[-1]
        assert last >= 0.95 and last > first
        held_out = training.held_out_ess(result.model, target, quick_config(eval_batch_size=2048),
                                         seed=99, iteration=0)
        assert held_out >= 0.95

    def test_deterministic(self, small_model, double_well_4):
        a = training.train(small_model, double_well_4, quick_config())
        b = training.train(small_model, double_well_4, quick_config())
        assert np.array_equal(a.state.theta, b.state.theta)
        assert a.metrics.drop(columns="wall_ms").equals(b.metrics.drop(columns="wall_ms"))

    def test_writes_metrics_and_checkpoints(self, small_model, double_well_4, tmp_path):
        result = training.train(small_model, double_well_4, quick_config(max_iters=10), out_dir=tmp_path)
        assert (tmp_path / METRICS_CSV_NAME).is_file()
        assert (tmp_path / CHECKPOINT_NAME).is_file()
        assert "wall_ms" not in read_csv(tmp_path / METRICS_CSV_NAME).columns
        timing = read_csv(tmp_path / TIMING_CSV_NAME)
        assert list(timing["iter"]) == list(result.metrics["iter"]) and (timing["wall_ms"] >= 0).all()
        assert [p.name for p in result.checkpoints[:2]] == ["checkpoint_00000005.ckpt", "checkpoint_00000010.ckpt"]
        assert list(result.metrics["iter"]) == list(range(10))

    def test_resume_is_bit_identical(self, small_model, double_well_4, tmp_path):
        full = training.train(small_model, double_well_4, quick_config(max_iters=20))
        training.train(small_model, double_well_4, quick_config(max_iters=10), out_dir=tmp_path)
        state = training.TrainState.from_checkpoint(load_checkpoint(tmp_path / CHECKPOINT_NAME))
        assert state.iteration == 10
        resumed = training.train(small_model, double_well_4, quick_config(max_iters=20), state=state)
        assert np.array_equal(resumed.state.theta, full.state.theta)
        assert np.array_equal(resumed.state.m, full.state.m)
        assert np.array_equal(resumed.state.v, full.state.v)

    def test_switch_keeps_optimizer_state(self, small_model, double_well_4):
        cfg = quick_config(max_iters=6, estimator="PathQP",
                           switch_rule=SwitchRule(start_estimator="RepQP", switch_at_iter=3))
        result = training.train(small_model, double_well_4, cfg)
        assert list(result.metrics["estimator_id"]) == ["RepQP"] * 3 + ["PathQP"] * 3
        assert list(result.metrics["switched"]) == [0, 0, 0, 1, 0, 0]
        assert result.state.step == 6

        head = training.train(small_model, double_well_4, quick_config(max_iters=3, estimator="RepQP"))
        tail = training.train(small_model, double_well_4, quick_config(max_iters=6), state=head.state)
        assert np.array_equal(tail.state.theta, result.state.theta)

    def test_walltime_budget(self, small_model, double_well_4):
        result = training.train(small_model, double_well_4, quick_config(max_iters=10_000, max_walltime_s=1e-9))
        assert result.stop_reason == "walltime"
        assert len(result.metrics) == 1

    def test_aborts_after_consecutive_failures(self, small_model, tmp_path):
        with pytest.raises(TrainingAborted) as info:
            training.train(small_model, BrokenTarget(), quick_config(max_consecutive_failures=3), out_dir=tmp_path)
        assert info.value.dump_path is not None and info.value.dump_path.is_file()


@pytest.mark.slow
class TestProbes:
    def test_timing(self, small_model, double_well_4):
        timings = training.timing_probe(small_model, double_well_4, N=64, reps=2)
        assert set(timings) == set(EstimatorId) - {EstimatorId.SCORE}
        assert all(t > 0 for t in timings.values())

    def test_memory(self, small_model, double_well_4):
        peaks = training.memory_probe(small_model, double_well_4, N=256)
        assert peaks[EstimatorId.REP_QP] > 0 and peaks[EstimatorId.PATH_QP] > 0

    @pytest.fixture
    def lattice_16(self):
        return make_model(seed=0, T=16, n_layers=6, hidden_layers=1, width=64), DoubleWellAction(16)

    def test_path_costs_two_to_three_reparameterization_passes(self, lattice_16):
        model, target = lattice_16
        timings = training.timing_probe(model, target, N=1024, reps=5,
                                        estimator_ids=(EstimatorId.REP_QP, EstimatorId.PATH_QP))
        assert 1.5 <= timings[EstimatorId.PATH_QP] / timings[EstimatorId.REP_QP] <= 3.0

    def test_path_memory_stays_near_reparameterization(self, lattice_16):
        model, target = lattice_16
        peaks = training.memory_probe(model, target, N=1024)
        assert peaks[EstimatorId.PATH_QP] <= 1.3 * peaks[EstimatorId.REP_QP]
