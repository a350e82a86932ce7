"""
Command-line entry point.

    pathflow train    CONFIG [--set k=v ...] [--resume CKPT]
    pathflow hmc      CONFIG [--set k=v ...]
    pathflow eval     CHECKPOINT [--hmc-dump FILE] [--n-q-samples N] [--config CONFIG]
                      (writes to CHECKPOINT_DIR/eval unless --out-dir is given)
    pathflow compare  CONFIG --estimators PathQP,RepQP,...
    pathflow diagnose CONFIG

Exit codes: 0 success, 2 usage or config error, 3 numeric or runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from pathflow.core.errors import ConfigError, ParseError, PathflowError, UsageError
from pathflow.core.schemas import EstimatorId, RunConfig
from pathflow.scripts import pipelines
from pathflow.utils.constants import EVAL_DIR_NAME, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE
from pathflow.utils.io_helpers import load_run_config, resolve_seeds

logger = logging.getLogger(__name__)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "out_dir", None):
        overrides.append(f"out_dir={args.out_dir}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    return resolve_seeds(load_run_config(args.config, overrides))


def cmd_train(args) -> int:
    pipelines.run_training(_config(args), resume=args.resume)
    return EXIT_OK


def cmd_hmc(args) -> int:
    pipelines.run_hmc(_config(args))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.out_dir and not any(o.strip().startswith("out_dir=") for o in args.set or []):
        args.out_dir = str(Path(args.checkpoint).parent / EVAL_DIR_NAME)
    pipelines.run_eval(args.checkpoint, _config(args), hmc_dump=args.hmc_dump,
                       n_q_samples=args.n_q_samples, use_config_target=args.config is not None)
    return EXIT_OK


def parse_estimators(text: str) -> list[EstimatorId]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    try:
        return [EstimatorId(name) for name in names]
    except ValueError as e:
        raise UsageError(f"unknown estimator in '{text}' (choose from {', '.join(EstimatorId)})") from e


def cmd_compare(args) -> int:
    pipelines.run_compare(_config(args), parse_estimators(args.estimators))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    pipelines.run_diagnostics(_config(args))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathflow",
                                     description="Normalizing flows trained with path-gradient estimators")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_positional=True):
        if config_positional:
            p.add_argument("config", help="YAML run config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override a config value")
        p.add_argument("--out-dir", dest="out_dir", help="Output directory (overrides out_dir)")
        p.add_argument("--workers", type=int, help="Parallel workers (determinism only with 1)")

    p = sub.add_parser("train", help="Train a flow")
    common(p)
    p.add_argument("--resume", help="Checkpoint with optimizer state to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("hmc", help="Generate ground-truth target samples")
    common(p)
    p.set_defaults(func=cmd_hmc)

    p = sub.add_parser("eval", help="Forward and reverse ESS of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="Run config; its target replaces the one stored in the checkpoint")
    p.add_argument("--hmc-dump", dest="hmc_dump", help="Target sample dump for forward ESS")
    p.add_argument("--n-q-samples", dest="n_q_samples", type=int, help="Flow samples for reverse ESS")
    common(p, config_positional=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="Train and compare several estimators")
    common(p)
    p.add_argument("--estimators", required=True, help="Comma-separated estimator names")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("diagnose", help="Oracle-backed estimator diagnostics")
    common(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ParseError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PathflowError as e:
        print(f"Run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
