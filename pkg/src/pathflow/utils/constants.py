from pathlib import Path
from importlib.resources import files

# Environment
SEED_ENV_VAR = "NF_SEED"

# Bundled example configs
CONFIGS_DIR = Path(str(files("pathflow"))).parent.parent / "configs"

# Run artifacts (relative to a run's out_dir)
RESOLVED_CONFIG_NAME = "resolved_config.yaml"
METRICS_CSV_NAME = "metrics.csv"
TIMING_CSV_NAME = "timing.csv"
CHECKPOINT_NAME = "model.ckpt"
FROZEN_TARGET_NAME = "frozen_target.ckpt"
EVAL_DIR_NAME = "eval"
CHECKPOINT_PATTERN = "checkpoint_{iteration:08d}.ckpt"
ABORT_DUMP_NAME = "abort_dump.yaml"
HMC_DUMP_NAME = "hmc_samples.bin"
HMC_SUMMARY_NAME = "hmc_summary.yaml"
ESS_REPORT_NAME = "ess_report.yaml"
COMPARISON_CSV_NAME = "comparison.csv"
GRADNORM_TRACE_NAME = "gradnorm_trace.csv"
DIAGNOSTICS_REPORT_NAME = "diagnostics_report.yaml"
VARIANCE_CSV_NAME = "variance.csv"

# Binary formats
CHECKPOINT_MAGIC = b"NFCKPT 1\n"
SAMPLE_MAGIC = b"NFSAMPLE"
SAMPLE_VERSION = 1

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
