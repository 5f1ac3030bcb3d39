"""
Main application module.

This module builds the command-line parser, configures logging, and
dispatches to the command handlers.

Usage:
    python app.py make-fixtures --output-dir fixtures --n-cases 10 --shape 48,48,24
    python app.py train --profile testing --data-root fixtures --output-dir runs/a
    python app.py evaluate --checkpoint runs/a/best.ckpt --data-root fixtures
    python app.py predict --checkpoint runs/a/best.ckpt --case-dir fixtures/BraTS_Synth_000
    python app.py plot runs/a/training_log.csv --output-dir runs/a/plots
"""

import argparse
import logging
import sys
from typing import List, Optional

from app_config import RunConfig, config
from commands import (
    cmd_evaluate,
    cmd_make_fixtures,
    cmd_plot,
    cmd_predict,
    cmd_train,
    report_failure,
)
from exceptions import ConfigError
from extensions import configure_logging

PROG = "brats-unet2d"


def flag_for(key: str) -> str:
    """The command-line flag of a config key."""
    return "--" + key.replace("_", "-")


def key_for(flag: str) -> str:
    """The config key of a command-line flag."""
    return flag.lstrip("-").replace("-", "_")


def _parse_shape(value: str) -> tuple:
    parts = [part for part in value.replace("x", ",").split(",") if part.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be H,W,D, got {value!r}")
    return tuple(int(part) for part in parts)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    """--profile, --config and one flag per RunConfig key."""
    parser.add_argument("--profile", choices=sorted(config), help="configuration profile")
    parser.add_argument("--config", help="flat key=value run file")
    group = parser.add_argument_group("run configuration")
    for key in RunConfig.keys():
        group.add_argument(flag_for(key), dest=key, metavar=key.upper(), help=RunConfig.help_for(key))


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors raise ConfigError instead of exiting."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def create_parser() -> argparse.ArgumentParser:
    """Build the parser with the train, evaluate, predict, plot and make-fixtures commands."""
    parser = _Parser(prog=PROG, description="2D U-Net brain tumor segmentation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    commands.required = True

    train = commands.add_parser("train", help="train a U-Net on a dataset root")
    _add_run_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("evaluate", help="evaluate a checkpoint on one partition")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    evaluate.add_argument("--label", help="dataset label of the report row")
    evaluate.add_argument(
        "--with-report",
        action="append",
        metavar="REPORT_CSV",
        help="earlier report.csv whose rows join the comparison (repeatable)",
    )
    _add_run_flags(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    predict = commands.add_parser("predict", help="predict the label volume of one case")
    predict.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    predict.add_argument("--case-dir", required=True, help="case directory to segment")
    _add_run_flags(predict)
    predict.set_defaults(handler=cmd_predict)

    plot = commands.add_parser("plot", help="curve images from training logs")
    plot.add_argument("csv_logs", nargs="+", metavar="CSV_LOG", help="training_log.csv files")
    plot.add_argument("--output-dir", default="plots", help="directory for the images")
    plot.add_argument(
        "--label", action="append", help="series label per log, in order (repeatable)"
    )
    plot.set_defaults(handler=cmd_plot)

    fixtures = commands.add_parser("make-fixtures", help="write a synthetic dataset")
    fixtures.add_argument("--output-dir", default="fixtures", help="dataset root to create")
    fixtures.add_argument("--n-cases", type=int, default=10, help="number of cases")
    fixtures.add_argument(
        "--shape", type=_parse_shape, default=(240, 240, 155), help="volume shape H,W,D"
    )
    fixtures.add_argument("--seed", type=int, default=0, help="seed of the first case")
    fixtures.set_defaults(handler=cmd_make_fixtures)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and run a command.

    Returns:
        int: 0 on success, 1 on usage errors, 2 on data errors, 3 otherwise.
    """
    configure_logging()
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        return report_failure(e)
    if args.verbose:
        configure_logging(logging.DEBUG)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
