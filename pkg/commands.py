"""
Command handlers for the segmentation pipeline.

This module contains the handlers behind every command-line command.
Handlers are organized into logical sections:
- Training commands
- Evaluation and prediction commands
- Output and fixture commands

Every handler takes the parsed arguments and returns an exit status. A
failure is logged, reported as one JSON line on stderr, and turned into
the exit code of its error class.
"""

import json
import sys
from argparse import Namespace
from functools import wraps
from pathlib import Path
from typing import Callable, List

import pandas as pd

from app_config import RunConfig
from data_pipeline import split_cases
from evaluation import (
    compare_reports,
    evaluate,
    predict_case,
    read_report,
    write_prediction,
    write_report,
)
from exceptions import BratsUnetError, ModalityMissing, MissingRoot, exit_code_for
from extensions import get_device, log_event, logger
from models import build_unet, count_parameters, load_checkpoint
from preprocess import composite_regions
from trainer import BEST_CHECKPOINT, CSV_LOG_NAME, train
from utils.overlay import save_overlay
from utils.plotting import plot_logs
from volume_io import (
    PREDICTION_SUFFIX,
    CaseRef,
    case_from_dir,
    discover_cases,
    generate_synthetic_dataset,
    label_counts,
    load_modality,
)

RUN_CONFIG_NAME = "run.cfg"
SPLIT_NAME = "split.csv"


def command(handler: Callable[[Namespace], None]) -> Callable[[Namespace], int]:
    """Run a handler and convert any failure into an exit status."""

    @wraps(handler)
    def run(args: Namespace) -> int:
        try:
            handler(args)
        except (BratsUnetError, OSError, RuntimeError, ValueError, KeyError) as e:
            return report_failure(e)
        return 0

    return run


def report_failure(error: BaseException) -> int:
    """Log an error, print its JSON line on stderr and return its exit code."""
    code = exit_code_for(error)
    logger.error("%s: %s", type(error).__name__, error)
    line = {"error": type(error).__name__, "message": str(error), "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def resolve_config(args: Namespace) -> RunConfig:
    """Resolve the run config of a command from its profile, file and flags."""
    overrides = {key: getattr(args, key, None) for key in RunConfig.keys()}
    return RunConfig.resolve(
        profile=getattr(args, "profile", None),
        config_file=getattr(args, "config", None),
        overrides=overrides,
    )


def _cases_of(config: RunConfig) -> List[CaseRef]:
    """The cases of the configured partition."""
    cases = discover_cases(config.data_root)
    if config.partition == "all":
        return cases
    return split_cases(cases, config.split_ratios, config.seed).partition(config.partition)


# ============================================================================
# Training Commands
# ============================================================================


@command
def cmd_train(args: Namespace) -> None:
    """Discover, split, build and train; write the log, checkpoints and config."""
    config = resolve_config(args)
    cases = discover_cases(config.data_root)
    split = split_cases(cases, config.split_ratios, config.seed)
    model = build_unet(config.unet_config(), seed=config.seed)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.to_file(out_dir / RUN_CONFIG_NAME)
    rows = [
        {"case_id": case.case_id, "partition": name}
        for name in ("train", "validation", "test")
        for case in split.partition(name)
    ]
    pd.DataFrame(rows, columns=["case_id", "partition"]).to_csv(out_dir / SPLIT_NAME, index=False)
    log_event(
        "run_start",
        f"{count_parameters(model)} parameters, split sizes {split.sizes()}, seed {config.seed}",
    )

    history = train(
        model,
        split,
        config.hyperparameters(),
        out_dir,
        window=config.window(),
        modalities=config.input_modalities,
        device=get_device(config.device),
    )
    print(
        f"trained {len(history)} epochs ({history.metadata['stop_reason']}); "
        f"log: {out_dir / CSV_LOG_NAME}; best checkpoint: {out_dir / BEST_CHECKPOINT}"
    )


# ============================================================================
# Evaluation and Prediction Commands
# ============================================================================


@command
def cmd_evaluate(args: Namespace) -> None:
    """Evaluate a checkpoint on one partition and print the comparison table."""
    config = resolve_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    label = args.label or Path(config.data_root).name
    report = evaluate(
        model,
        _cases_of(config),
        config.window(),
        dataset_label=label,
        partition=config.partition,
        decision_mode=config.decision_mode,
        batch_size=config.batch_size,
        modalities=config.input_modalities,
    )
    reports = [earlier for path in args.with_report or [] for earlier in read_report(path)]
    table = compare_reports(reports + [report])
    write_report(table, config.output_dir)
    print(table.render())


@command
def cmd_predict(args: Namespace) -> None:
    """Write `<case>_pred` and an overlay image; print voxel counts."""
    config = resolve_config(args)
    case_dir = Path(args.case_dir)
    if not case_dir.is_dir():
        raise MissingRoot(case_dir)
    case = case_from_dir(case_dir)
    if case is None:
        raise ModalityMissing(f"no modality files in {case_dir}")

    model, _ = load_checkpoint(args.checkpoint)
    window = config.window()
    labels = predict_case(model, case, window, modalities=config.input_modalities)
    out_dir = Path(config.output_dir)
    path = write_prediction(labels, case, out_dir, config.input_modalities[0])

    middle = window.start + window.length // 2
    reference = load_modality(case, config.input_modalities[0])
    save_overlay(
        reference.data[:, :, middle],
        labels.data[:, :, middle],
        out_dir / f"{case.case_id}_{PREDICTION_SUFFIX}.png",
    )

    print(f"prediction: {path}")
    for value, count in label_counts(labels.data).items():
        print(f"label {value}: {count} voxels")
    for region, mask in composite_regions(labels.data).items():
        print(f"{region} tumor: {int(mask.sum())} voxels")


# ============================================================================
# Output and Fixture Commands
# ============================================================================


@command
def cmd_plot(args: Namespace) -> None:
    """Curve images from one or more training logs."""
    written = plot_logs(args.csv_logs, args.output_dir, labels=args.label or None)
    for path in written:
        print(path)


@command
def cmd_make_fixtures(args: Namespace) -> None:
    """Generate a synthetic BraTS-layout dataset."""
    cases = generate_synthetic_dataset(
        args.seed, args.output_dir, args.n_cases, tuple(args.shape)
    )
    for case in cases:
        print(case.root_path)
