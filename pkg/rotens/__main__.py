import argparse
import sys
from importlib.metadata import PackageNotFoundError, version
from logging import INFO, basicConfig, getLogger
from pathlib import Path

from rotens.config import ExperimentConfig, default_config_path
from rotens.errors import RotensError
from rotens.experiments import cmd_analyze_c4, cmd_generate, cmd_report, cmd_train
from rotens.selftest import run_selftest

logger = getLogger("rotens")


def non_negative_int(value: str) -> int:
    try:
        parsed = int(value)
    except ValueError:
        parsed = -1
    if parsed < 0:
        raise argparse.ArgumentTypeError(f"Expected a non-negative integer, got {value!r}")
    return parsed


def positive_int(value: str) -> int:
    parsed = non_negative_int(value)
    if parsed == 0:
        raise argparse.ArgumentTypeError("Expected a positive integer, got 0")
    return parsed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotens",
        description="Transform-enclosed feature-map ensembles for rotation-robust image classification",
    )
    try:
        __version__ = version("rotens")
    except PackageNotFoundError:
        __version__ = "local-build"
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        help=f"Experiment config file (default: {default_config_path()} if it exists)",
    )
    common.add_argument("--out", type=Path, help="Output directory (overrides output_dir)")
    common.add_argument("--seed", type=non_negative_int, help="Run a single seed (overrides seeds)")
    common.add_argument("--jobs", type=positive_int, help="Concurrent training jobs (overrides jobs)")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="Write the transformed datasets")
    commands.add_parser("train", parents=[common], help="Train every cell of the grid")
    commands.add_parser(
        "analyze-c4", parents=[common], help="Accuracy of each cell on the test set at 0/90/180/270 degrees"
    )
    commands.add_parser("report", parents=[common], help="Summarize the grid with best/second-best flags")
    commands.add_parser(
        "selftest", parents=[common], help="Check invariance, equivariance and gradients on fresh models"
    )
    return parser


def main(argv=None) -> int:
    basicConfig(level=INFO)  # set up logging
    args = build_parser().parse_args(argv)

    try:
        if args.command == "selftest":
            results = run_selftest(seed=args.seed or 0)
            logger.info("All %d self-test checks passed", len(results))
            return 0

        cfg = ExperimentConfig.load(args.config).with_overrides(
            output_dir=args.out, seed=args.seed, jobs=args.jobs
        )
        if args.command == "generate":
            for directory in cmd_generate(cfg):
                logger.info("Generated %s", directory)
        elif args.command == "train":
            cells = cmd_train(cfg)
            logger.info("Trained %d cells under %s", len(cells), cfg.output_dir)
        elif args.command == "analyze-c4":
            logger.info("Wrote %s", cmd_analyze_c4(cfg))
        elif args.command == "report":
            sys.stdout.write(cmd_report(cfg))
            sys.stdout.flush()
    except RotensError as e:
        logger.error("%s", e)
        return e.exit_code
    except KeyboardInterrupt:
        sys.stderr.write("\nExiting due to Ctrl-C\n")
        sys.stderr.flush()
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
