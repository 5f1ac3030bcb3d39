"""
Training loop and callbacks.

Each epoch runs one Adam update per training batch on the categorical
cross-entropy, evaluates the validation partition, records a history row,
and then calls the callbacks in order: CSV logger, model checkpoint, early
stopping.
"""

import csv
import errno
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from data_pipeline import BatchGenerator, DatasetSplit
from evaluation import run_batches
from exceptions import (
    ConfigInvalid,
    DiskFull,
    EmptyDataset,
    InconsistentColumns,
    IoFailure,
    ShapeMismatch,
    UnknownMetric,
)
from extensions import get_device, log_event, logger, seed_everything
from metrics import CLIP_EPSILON, CSV_COLUMNS, METRIC_NAMES, SOFT, VALIDATION_NAMES, MetricAccumulator, MetricValues
from models import UNet, save_checkpoint
from preprocess import DEFAULT_MODALITIES, SliceWindow
from volume_io import Modality

MONITOR_NAMES = METRIC_NAMES + VALIDATION_NAMES

CSV_LOG_NAME = "training_log.csv"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"

CONTINUE = "continue"
STOP = "stop"
SAVED = "saved"
SKIPPED = "skipped"

# Defaults chosen here rather than published with the method.
ASSUMED_DEFAULTS = (
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "early_stop_patience",
    "early_stop_min_delta",
    "monitor",
)


@dataclass
class Hyperparameters:
    """
    Training hyperparameters.

    Attributes:
        epochs (int): Maximum number of epochs
        batch_size (int): Samples per Adam update
        learning_rate (float): Adam step size; 0 freezes the parameters
        adam_beta1, adam_beta2, adam_eps (float): Adam moment settings
        early_stop_patience (int): Epochs without improvement before stopping
        early_stop_min_delta (float): Smallest change counted as improvement
        monitor (str): Logged metric driving early stopping and checkpoints
        seed (int): Seed for initialization-independent randomness
    """

    epochs: int = 235
    batch_size: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    early_stop_patience: int = 10
    early_stop_min_delta: float = 0.0
    monitor: str = "val_loss"
    seed: int = 0

    def validate(self) -> None:
        """Raise ConfigInvalid or UnknownMetric on invalid values."""
        if self.epochs < 1:
            raise ConfigInvalid(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigInvalid(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigInvalid(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise ConfigInvalid("early_stop_patience must be >= 1")
        if self.early_stop_min_delta < 0:
            raise ConfigInvalid("early_stop_min_delta must be >= 0")
        check_monitor(self.monitor)


@dataclass
class EpochRecord:
    """One history row: metrics of a completed epoch."""

    epoch: int
    train: MetricValues
    validation: MetricValues
    seconds: float
    steps: int = 0

    def row(self) -> Dict[str, float]:
        """Values keyed by CSV column."""
        values: Dict[str, float] = {"epoch": self.epoch}
        values.update(self.train.as_dict())
        values.update({f"val_{k}": v for k, v in self.validation.as_dict().items()})
        values["seconds"] = self.seconds
        return values


@dataclass
class TrainingHistory:
    """Per-epoch records plus run metadata (seed, config, stop reason)."""

    records: List[EpochRecord] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, name: str) -> List[float]:
        """Values of one logged metric, e.g. "loss" or "val_dice", by epoch."""
        check_monitor(name)
        return [record.row()[name] for record in self.records]


def check_monitor(name: str) -> None:
    if name not in MONITOR_NAMES:
        raise UnknownMetric(name)


def lower_is_better(name: str) -> bool:
    return name.endswith("loss")


def _improves(value: float, best: float, lower: bool, min_delta: float) -> bool:
    return value < best - min_delta if lower else value > best + min_delta


def best_epoch_index(values: Sequence[float], lower: bool, min_delta: float = 0.0) -> int:
    """Index of the last value that improved on every earlier best by > min_delta."""
    best_index, best = 0, values[0]
    for index, value in enumerate(values[1:], start=1):
        if _improves(value, best, lower, min_delta):
            best_index, best = index, value
    return best_index


# ============================================================================
# Callback operations
# ============================================================================


def early_stopping_check(
    history: TrainingHistory, monitor: str, patience: int, min_delta: float = 0.0
) -> str:
    """Decide whether training should stop.

    Stops once `patience` epochs have passed since the best epoch without an
    improvement larger than min_delta. Loss metrics improve downwards, all
    others upwards.

    Returns:
        str: "stop" or "continue".

    Raises:
        UnknownMetric: If monitor is not a logged metric.
    """
    values = history.series(monitor)
    if not values:
        raise ValueError("history is empty")
    best = best_epoch_index(values, lower_is_better(monitor), min_delta)
    return STOP if len(values) - 1 - best >= patience else CONTINUE


def _write_failure(error: OSError, path: Path) -> IoFailure:
    if error.errno == errno.ENOSPC:
        return DiskFull(f"no space left writing {path}", str(path))
    return IoFailure(f"cannot write {path}: {error}", str(path))


def append_csv_log(record: EpochRecord, path: "str | os.PathLike") -> None:
    """Append one epoch row to the training log, writing the header first.

    Raises:
        IoFailure: If the file cannot be written.
    """
    path = Path(path)
    row = record.row()
    try:
        write_header = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            if write_header:
                writer.writerow(CSV_COLUMNS)
            writer.writerow(
                [row["epoch"]] + [repr(float(row[name])) for name in CSV_COLUMNS[1:]]
            )
            f.flush()
    except OSError as e:
        raise _write_failure(e, path) from e


def read_csv_log(path: "str | os.PathLike") -> pd.DataFrame:
    """Read a training log back, checking the column contract.

    Raises:
        InconsistentColumns: Naming the first missing column.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InconsistentColumns(f"cannot parse training log {path}: {e}") from e
    for column in CSV_COLUMNS:
        if column not in frame.columns:
            raise InconsistentColumns(f"training log {path} is missing column {column!r}")
    return frame


def checkpoint_if_best(
    model: UNet, history: TrainingHistory, monitor: str, out_dir: "str | os.PathLike"
) -> str:
    """Refresh last.ckpt, and best.ckpt when the latest epoch is the best so far.

    Returns:
        str: "saved" if best.ckpt was written, otherwise "skipped".
    """
    values = history.series(monitor)
    if not values:
        raise ValueError("history is empty")
    out_dir = Path(out_dir)
    record = history.records[-1]
    metadata = {
        "epoch": record.epoch,
        "monitor": monitor,
        "value": float(values[-1]),
        "seed": history.metadata.get("seed"),
        "input_modalities": history.metadata.get("input_modalities"),
    }
    save_checkpoint(model, out_dir / LAST_CHECKPOINT, metadata)

    lower = lower_is_better(monitor)
    if len(values) > 1 and not all(_improves(values[-1], v, lower, 0.0) for v in values[:-1]):
        return SKIPPED
    save_checkpoint(model, out_dir / BEST_CHECKPOINT, metadata)
    log_event("checkpoint_saved", f"epoch {record.epoch} {monitor}={values[-1]:.6f}")
    return SAVED


class Callback:
    """Hook called after every epoch; returning True requests a stop."""

    def on_train_begin(self) -> None:
        pass

    def on_epoch_end(self, model: UNet, history: TrainingHistory) -> bool:
        return False


class CSVLogger(Callback):
    def __init__(self, path: "str | os.PathLike"):
        self.path = Path(path)

    def on_train_begin(self) -> None:
        if self.path.exists():
            self.path.unlink()

    def on_epoch_end(self, model: UNet, history: TrainingHistory) -> bool:
        append_csv_log(history.records[-1], self.path)
        return False


class ModelCheckpoint(Callback):
    def __init__(self, out_dir: "str | os.PathLike", monitor: str):
        self.out_dir = Path(out_dir)
        self.monitor = monitor
        self.results: List[str] = []

    def on_epoch_end(self, model: UNet, history: TrainingHistory) -> bool:
        self.results.append(checkpoint_if_best(model, history, self.monitor, self.out_dir))
        return False


class EarlyStopping(Callback):
    def __init__(self, monitor: str, patience: int, min_delta: float = 0.0):
        self.monitor = monitor
        self.patience = patience
        self.min_delta = min_delta

    def on_epoch_end(self, model: UNet, history: TrainingHistory) -> bool:
        return early_stopping_check(history, self.monitor, self.patience, self.min_delta) == STOP


def default_callbacks(hp: Hyperparameters, out_dir: "str | os.PathLike") -> List[Callback]:
    """CSV logger, checkpoint and early stopping, in that order."""
    out_dir = Path(out_dir)
    return [
        CSVLogger(out_dir / CSV_LOG_NAME),
        ModelCheckpoint(out_dir, hp.monitor),
        EarlyStopping(hp.monitor, hp.early_stop_patience, hp.early_stop_min_delta),
    ]


# ============================================================================
# Training
# ============================================================================


def cross_entropy_loss(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy on probabilities clipped to [1e-7, 1 - 1e-7]."""
    clipped = torch.clamp(probs, CLIP_EPSILON, 1.0 - CLIP_EPSILON)
    return -(target * torch.log(clipped)).sum(dim=-1).mean()


def _validate(model: UNet, batches: BatchGenerator) -> MetricValues:
    return run_batches(model, batches).result(SOFT)


def _train_epoch(
    model: UNet,
    batches: BatchGenerator,
    optimizer: torch.optim.Optimizer,
    device: torch.device,
) -> Tuple[MetricValues, int]:
    model.train()
    accumulator = MetricAccumulator(model.config.num_classes)
    steps = 0
    for batch in batches:
        inputs = torch.from_numpy(batch.inputs).to(device)
        targets = torch.from_numpy(batch.targets).to(device)
        probs = model(inputs)
        loss = cross_entropy_loss(targets, probs)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        steps += 1
        accumulator.update(batch.targets, probs.detach().cpu().numpy())
    model.eval()
    return accumulator.result(SOFT), steps


def train(
    model: UNet,
    split: DatasetSplit,
    hp: Hyperparameters,
    out_dir: "str | os.PathLike",
    window: SliceWindow = SliceWindow(),
    modalities: Sequence[Modality] = DEFAULT_MODALITIES,
    callbacks: Optional[List[Callback]] = None,
    device: Optional[torch.device] = None,
) -> TrainingHistory:
    """Train a model on the split's training cases.

    Args:
        model (UNet): The model, mutated in place.
        split (DatasetSplit): Train cases are fitted, validation cases
            evaluated after every epoch.
        hp (Hyperparameters): Training settings.
        out_dir: Directory for the log and checkpoints.
        window (SliceWindow): Slices used from every case.
        modalities: Input channels, matching model.config.in_channels.
        callbacks: Defaults to default_callbacks(hp, out_dir).
        device: Defaults to CPU.

    Returns:
        TrainingHistory: One record per completed epoch.

    Raises:
        ConfigInvalid: On invalid hyperparameters.
        ShapeMismatch: If the model does not take len(modalities) channels.
        SampleError: On data errors, with the failing (case, slice).
        IoFailure: If a callback cannot write.
    """
    hp.validate()
    if model.config.in_channels != len(modalities):
        raise ShapeMismatch(
            f"model takes {model.config.in_channels} channels, "
            f"got {len(modalities)} modalities"
        )
    if not split.train or not split.validation:
        raise EmptyDataset("training and validation partitions must be non-empty")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = device or get_device()
    seed_everything(hp.seed)
    model.to(device)

    size = model.config.input_size
    train_batches = BatchGenerator(
        split.train, window, hp.batch_size, shuffle=True, seed=hp.seed, size=size, modalities=modalities
    )
    val_batches = BatchGenerator(
        split.validation, window, hp.batch_size, shuffle=False, size=size, modalities=modalities
    )
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=hp.learning_rate,
        betas=(hp.adam_beta1, hp.adam_beta2),
        eps=hp.adam_eps,
    )

    history = TrainingHistory(
        metadata={
            "seed": hp.seed,
            "input_modalities": [Modality.parse(m).value for m in modalities],
            "config": asdict(model.config),
            "hyperparameters": asdict(hp),
            "assumed_defaults": list(ASSUMED_DEFAULTS),
            "stop_reason": "completed",
        }
    )
    callbacks = default_callbacks(hp, out_dir) if callbacks is None else callbacks
    for callback in callbacks:
        callback.on_train_begin()

    log_event(
        "train_start",
        f"{len(split.train)} train / {len(split.validation)} validation cases, "
        f"{len(train_batches)} batches per epoch, up to {hp.epochs} epochs",
    )
    for epoch in range(1, hp.epochs + 1):
        started = time.perf_counter()
        train_batches.set_epoch(epoch - 1)
        train_values, steps = _train_epoch(model, train_batches, optimizer, device)
        val_values = _validate(model, val_batches)
        record = EpochRecord(
            epoch=epoch,
            train=train_values,
            validation=val_values,
            seconds=time.perf_counter() - started,
            steps=steps,
        )
        history.records.append(record)
        log_event(
            "epoch_end",
            f"epoch {epoch}/{hp.epochs} loss={train_values.loss:.4f} "
            f"val_loss={val_values.loss:.4f} val_dice={val_values.dice:.4f}",
        )

        stop = False
        for callback in callbacks:
            stop = callback.on_epoch_end(model, history) or stop
        if stop:
            history.metadata["stop_reason"] = "early_stop"
            log_event("early_stop", f"no {hp.monitor} improvement after epoch {epoch}")
            break

    logger.info("training finished after %d epochs", len(history))
    return history


def parameters_snapshot(model: UNet) -> Dict[str, np.ndarray]:
    """Copies of every parameter, for before/after comparisons."""
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
