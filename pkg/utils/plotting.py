"""
Training curve images.

Each image plots one metric against the epoch, train and validation
series overlaid. Figures are written to files only, through the Agg
backend.
"""

import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from exceptions import IoFailure  # noqa: E402
from extensions import log_event  # noqa: E402
from trainer import read_csv_log  # noqa: E402

# Image name -> (train column, validation column, axis label)
CURVES: Dict[str, Tuple[str, str, str]] = {
    "loss": ("loss", "val_loss", "Loss"),
    "accuracy": ("accuracy", "val_accuracy", "Accuracy"),
    "dice": ("dice", "val_dice", "Dice coefficient"),
}
COMPARISON_PREFIX = "comparison_"
FIGURE_SIZE = (6, 4)
DPI = 100


def _save(fig, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=DPI, metadata={"Software": None})
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}", str(path)) from e
    finally:
        plt.close(fig)
    return path


def plot_history(frame: pd.DataFrame, out_dir: "str | os.PathLike", title: str = "") -> List[Path]:
    """Write loss.png, accuracy.png and dice.png from a training log frame."""
    out_dir = Path(out_dir)
    written = []
    for name, (train_column, val_column, axis_label) in CURVES.items():
        fig, ax = plt.subplots(figsize=FIGURE_SIZE)
        ax.plot(frame["epoch"], frame[train_column], marker="o", label="train")
        ax.plot(frame["epoch"], frame[val_column], marker="o", label="validation")
        ax.set_xlabel("Epoch")
        ax.set_ylabel(axis_label)
        ax.set_title(f"{title} {axis_label}".strip())
        ax.legend()
        written.append(_save(fig, out_dir / f"{name}.png"))
    return written


def plot_comparison(
    frames: Sequence[pd.DataFrame], labels: Sequence[str], out_dir: "str | os.PathLike"
) -> List[Path]:
    """Overlay the validation curves of several runs, one series per run."""
    out_dir = Path(out_dir)
    written = []
    for name, (_, val_column, axis_label) in CURVES.items():
        fig, ax = plt.subplots(figsize=FIGURE_SIZE)
        for frame, label in zip(frames, labels):
            ax.plot(frame["epoch"], frame[val_column], marker="o", label=label)
        ax.set_xlabel("Epoch")
        ax.set_ylabel(f"Validation {axis_label.lower()}")
        ax.legend()
        written.append(_save(fig, out_dir / f"{COMPARISON_PREFIX}{name}.png"))
    return written


def plot_logs(
    csv_paths: Sequence["str | os.PathLike"],
    out_dir: "str | os.PathLike",
    labels: Optional[Sequence[str]] = None,
) -> List[Path]:
    """Curve images for one or more training logs.

    One log gives the three train/validation images. Several logs give the
    three images of each log in a subdirectory named by its label, plus
    the comparison images.

    Raises:
        InconsistentColumns: If a log lacks a column, naming it.
    """
    paths = [Path(p) for p in csv_paths]
    labels = list(labels) if labels else [p.parent.name or p.stem for p in paths]
    if len(labels) != len(paths):
        raise ValueError("need one label per training log")
    if len(set(labels)) != len(labels):
        labels = [f"{label}_{i}" for i, label in enumerate(labels)]
    frames = [read_csv_log(path) for path in paths]

    out_dir = Path(out_dir)
    if len(frames) == 1:
        written = plot_history(frames[0], out_dir, title=labels[0])
    else:
        written = []
        for frame, label in zip(frames, labels):
            written += plot_history(frame, out_dir / label, title=label)
        written += plot_comparison(frames, labels, out_dir)
    log_event("plots_written", f"{len(written)} images in {out_dir}")
    return written
