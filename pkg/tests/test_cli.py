import numpy as np
import pytest
import yaml

from pathflow.scripts.cli import main
from pathflow.utils.constants import (
    CHECKPOINT_NAME,
    COMPARISON_CSV_NAME,
    CONFIGS_DIR,
    DIAGNOSTICS_REPORT_NAME,
    ESS_REPORT_NAME,
    EVAL_DIR_NAME,
    EXIT_OK,
    EXIT_USAGE,
    FROZEN_TARGET_NAME,
    GRADNORM_TRACE_NAME,
    HMC_DUMP_NAME,
    HMC_SUMMARY_NAME,
    METRICS_CSV_NAME,
    RESOLVED_CONFIG_NAME,
    TIMING_CSV_NAME,
    VARIANCE_CSV_NAME,
)
from pathflow.utils.io_helpers import load_samples, read_csv, save_checkpoint

from conftest import make_model

SELF_TARGET = str(CONFIGS_DIR / "self_target.yaml")
GAUSSIAN = str(CONFIGS_DIR / "gaussian1d.yaml")
QUICK = ["--set", "train.max_iters=6", "--set", "train.eval_every=3", "--set", "train.progress=false"]


def train(out_dir, *extra):
    return main(["train", SELF_TARGET, "--out-dir", str(out_dir), *QUICK, *extra])


class TestTrain:
    def test_writes_run_artifacts(self, tmp_path):
        assert train(tmp_path) == EXIT_OK
        metrics = read_csv(tmp_path / METRICS_CSV_NAME)
        assert list(metrics["iter"]) == [0, 2, 5]
        assert (tmp_path / CHECKPOINT_NAME).is_file()
        resolved = yaml.safe_load((tmp_path / RESOLVED_CONFIG_NAME).read_text())
        assert resolved["seed"] == 7
        assert resolved["train"]["seed"] is not None

    def test_self_target_keeps_zero_gradient(self, tmp_path):
        train(tmp_path)
        metrics = read_csv(tmp_path / METRICS_CSV_NAME)
        assert metrics["grad_norm"].max() <= 1e-8

    def test_runs_are_reproducible(self, tmp_path):
        train(tmp_path / "a")
        train(tmp_path / "b")
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / METRICS_CSV_NAME).read_bytes() == (b / METRICS_CSV_NAME).read_bytes()
        assert "wall_ms" not in read_csv(a / METRICS_CSV_NAME).columns
        assert list(read_csv(a / TIMING_CSV_NAME).columns) == ["iter", "estimator_id", "wall_ms"]
        assert (tmp_path / "a" / CHECKPOINT_NAME).read_bytes() == (tmp_path / "b" / CHECKPOINT_NAME).read_bytes()

    def test_resume(self, tmp_path):
        train(tmp_path / "first")
        code = main(["train", SELF_TARGET, "--out-dir", str(tmp_path / "second"), "--set", "train.max_iters=8",
                     "--set", "train.progress=false", "--resume", str(tmp_path / "first" / CHECKPOINT_NAME)])
        assert code == EXIT_OK
        assert read_csv(tmp_path / "second" / METRICS_CSV_NAME)["iter"].min() >= 6

    def test_unknown_config_key(self, tmp_path, capsys):
        assert train(tmp_path, "--set", "train.estimtor=PathQP") == EXIT_USAGE
        assert "train.estimtor" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.yaml")]) == EXIT_USAGE


class TestEval:
    def test_self_checkpoint_has_unit_ess(self, tmp_path):
        train(tmp_path / "run")
        code = main(["eval", str(tmp_path / "run" / CHECKPOINT_NAME), "--out-dir", str(tmp_path / "eval"),
                     "--n-q-samples", "2000", "--set", "eval.n_bootstrap=20"])
        assert code == EXIT_OK
        report = yaml.safe_load((tmp_path / "eval" / ESS_REPORT_NAME).read_text())
        assert report["reverse_ess"] == pytest.approx(1.0, abs=1e-9)
        assert report["forward_ess"] is None

    def test_too_few_samples(self, tmp_path):
        train(tmp_path / "run")
        code = main(["eval", str(tmp_path / "run" / CHECKPOINT_NAME), "--out-dir", str(tmp_path / "eval"),
                     "--n-q-samples", "1"])
        assert code == EXIT_USAGE

    def test_trained_flow_differs_from_its_frozen_start(self, tmp_path):
        assert train(tmp_path / "run", "--set", "train.estimator=RepQP", "--set", "train.lr0=0.05") == EXIT_OK
        assert (tmp_path / "run" / FROZEN_TARGET_NAME).is_file()
        code = main(["eval", str(tmp_path / "run" / CHECKPOINT_NAME), "--out-dir", str(tmp_path / "eval"),
                     "--n-q-samples", "2000", "--set", "eval.n_bootstrap=20"])
        assert code == EXIT_OK
        report = yaml.safe_load((tmp_path / "eval" / ESS_REPORT_NAME).read_text())
        assert report["reverse_ess"] < 0.999

    def test_missing_frozen_snapshot(self, tmp_path):
        train(tmp_path / "run")
        (tmp_path / "run" / FROZEN_TARGET_NAME).unlink()
        code = main(["eval", str(tmp_path / "run" / CHECKPOINT_NAME), "--out-dir", str(tmp_path / "eval")])
        assert code == EXIT_USAGE

    def test_self_header_without_snapshot(self, tmp_path):
        path = save_checkpoint(tmp_path / "old.ckpt", make_model(), {"kind": "self", "T": 4})
        assert main(["eval", str(path), "--out-dir", str(tmp_path / "eval")]) == EXIT_USAGE

    def test_default_out_dir_is_next_to_checkpoint(self, tmp_path):
        train(tmp_path / "run")
        config_before = (tmp_path / "run" / RESOLVED_CONFIG_NAME).read_bytes()
        code = main(["eval", str(tmp_path / "run" / CHECKPOINT_NAME), "--n-q-samples", "500",
                     "--set", "eval.n_bootstrap=10"])
        assert code == EXIT_OK
        assert (tmp_path / "run" / EVAL_DIR_NAME / ESS_REPORT_NAME).is_file()
        assert (tmp_path / "run" / RESOLVED_CONFIG_NAME).read_bytes() == config_before

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", str(tmp_path / "none.ckpt"), "--out-dir", str(tmp_path)]) == EXIT_USAGE


class TestHmc:
    def test_writes_samples_and_summary(self, tmp_path):
        code = main(["hmc", GAUSSIAN, "--out-dir", str(tmp_path), "--set", "hmc.n_chains=2",
                     "--set", "hmc.n_steps=50", "--set", "hmc.burn_in=10", "--set", "hmc.progress=false"])
        assert code == EXIT_OK
        samples = load_samples(tmp_path / HMC_DUMP_NAME)
        assert samples.shape == (100, 1) and np.all(np.isfinite(samples))
        summary = yaml.safe_load((tmp_path / HMC_SUMMARY_NAME).read_text())
        assert summary["n_samples"] == 100


class TestCompare:
    def test_empty_estimator_list(self, tmp_path):
        assert main(["compare", SELF_TARGET, "--out-dir", str(tmp_path), "--estimators", ","]) == EXIT_USAGE

    def test_unknown_estimator(self, tmp_path):
        assert main(["compare", SELF_TARGET, "--out-dir", str(tmp_path), "--estimators", "PathQP,Magic"]) == EXIT_USAGE


def test_argument_errors_exit_with_usage():
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE


@pytest.mark.slow
def test_compare_writes_table_and_trace(tmp_path):
    code = main(["compare", SELF_TARGET, "--out-dir", str(tmp_path), "--estimators", "PathQP,RepQP",
                 "--set", "train.max_iters=4", "--set", "train.progress=false",
                 "--set", "eval.n_q_samples=500", "--set", "eval.n_bootstrap=10"])
    assert code == EXIT_OK
    table = read_csv(tmp_path / COMPARISON_CSV_NAME)
    assert list(table["estimator_id"]) == ["PathQP", "RepQP"]
    assert list(table["max_iters"]) == [4, 8]
    assert (tmp_path / GRADNORM_TRACE_NAME).is_file()


@pytest.mark.slow
def test_diagnose_writes_report(tmp_path):
    code = main(["diagnose", GAUSSIAN, "--out-dir", str(tmp_path), "--set", "diagnostics.n_replicates=30",
                 "--set", "diagnostics.batch_size=64", "--set", "diagnostics.bias_batch_sizes=[32]"])
    assert code == EXIT_OK
    report = yaml.safe_load((tmp_path / DIAGNOSTICS_REPORT_NAME).read_text())
    assert {"singular_regime", "score_zero_mean", "affine_oracle"} <= set(report)
    assert len(read_csv(tmp_path / VARIANCE_CSV_NAME)) == 6
