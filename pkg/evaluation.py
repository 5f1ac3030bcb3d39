"""
Evaluation reports, cross-dataset comparison and full-volume prediction.

Metrics are pooled over every pixel of every evaluated slice, not averaged
per slice, so blank slices carry no extra weight. Each case is accumulated
on its own and the per-case sums are merged in case-id order, which makes
a report independent of the order cases are passed in.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from torch import nn

from data_pipeline import Batch, BatchGenerator
from exceptions import InconsistentColumns, IoFailure
from extensions import log_event, logger
from metrics import HARD, METRIC_NAMES, SOFT, MetricAccumulator, MetricValues, predicted_classes
from models import forward
from preprocess import (
    DEFAULT_MODALITIES,
    DEFAULT_SIZE,
    LABEL,
    SliceWindow,
    build_inputs,
    inverse_remap_labels,
    resize_slice,
)
from volume_io import (
    NIFTI_EXTENSIONS,
    PREDICTION_SUFFIX,
    CaseRef,
    LabelVolume,
    Modality,
    load_modality,
    save_volume,
)

Predictor = Callable[[Batch], np.ndarray]
ModelLike = Union[nn.Module, Predictor]

REPORT_FIELDS = ("dataset", "partition", "decision_mode", "n_cases", "n_slices")
REPORT_COLUMNS = REPORT_FIELDS + METRIC_NAMES
REPORT_TEXT = "report.txt"
REPORT_CSV = "report.csv"

POOLING_NOTE = "metrics pooled over all pixels of all slices (not averaged per slice)"
DICE_NOTES = {
    HARD: "dice: mean of the necrotic, edema and enhancing argmax dice",
    SOFT: "dice: soft dice pooled over all four channels",
}


@dataclass
class MetricsReport:
    """
    The reported metrics of one dataset partition.

    Attributes:
        dataset_label (str): Name of the evaluated dataset
        partition (str): train, validation, test or all
        values (MetricValues): Headline values in the report decision mode
        n_cases (int): Evaluated cases
        n_slices (int): Evaluated slices, n_cases * window length
        decision_mode (str): "hard" (argmax dice) or "soft"
        soft_values (Optional[MetricValues]): Soft-dice values, when computed
        region_dice (Dict[str, float]): Whole, core and enhancing hard dice
    """

    dataset_label: str
    partition: str
    values: MetricValues
    n_cases: int
    n_slices: int
    decision_mode: str = HARD
    soft_values: Optional[MetricValues] = None
    region_dice: Dict[str, float] = field(default_factory=dict)

    def record(self) -> Dict[str, Any]:
        """One machine-readable row keyed by REPORT_COLUMNS."""
        row: Dict[str, Any] = {
            "dataset": self.dataset_label,
            "partition": self.partition,
            "decision_mode": self.decision_mode,
            "n_cases": self.n_cases,
            "n_slices": self.n_slices,
        }
        row.update(self.values.as_dict())
        return row


def as_predictor(model: ModelLike) -> Predictor:
    """Wrap a U-Net as a batch predictor; callables pass through unchanged."""
    if isinstance(model, nn.Module):

        def predict(batch: Batch) -> np.ndarray:
            return forward(model, batch.inputs)

        return predict
    if callable(model):
        return model
    raise TypeError(f"expected a model or a batch predictor, got {type(model).__name__}")


def _input_size(model: ModelLike) -> Tuple[int, int]:
    config = getattr(model, "config", None)
    return tuple(config.input_size) if config is not None else DEFAULT_SIZE


def run_batches(model: ModelLike, batches: Sequence[Batch]) -> MetricAccumulator:
    """Accumulate the metrics of a model over batches with targets."""
    predictor = as_predictor(model)
    accumulator = MetricAccumulator()
    for batch in batches:
        accumulator.update(batch.targets, predictor(batch))
    return accumulator


# ============================================================================
# Reports
# ============================================================================


def evaluate(
    model: ModelLike,
    cases: Sequence[CaseRef],
    window: SliceWindow,
    dataset_label: str = "dataset",
    partition: str = "test",
    decision_mode: str = HARD,
    batch_size: int = 1,
    modalities: Sequence[Modality] = DEFAULT_MODALITIES,
    size: Optional[Tuple[int, int]] = None,
    workers: int = 1,
) -> MetricsReport:
    """Evaluate a model on every in-window slice of the given cases.

    Args:
        model: A UNet, or a callable mapping a Batch to probabilities.
        cases: Cases with segmentations.
        window (SliceWindow): Slices evaluated per case.
        dataset_label (str): Row label of the report.
        partition (str): Partition the cases come from.
        decision_mode (str): "hard" or "soft" headline dice.
        batch_size (int): Slices per forward pass.
        modalities: Input channels, in order.
        size: Network input size; defaults to the model's.
        workers (int): Cases evaluated concurrently.

    Returns:
        MetricsReport: Headline values plus soft values and region dice.

    Raises:
        DataError: Propagated from loading and preprocessing.
    """
    if decision_mode not in (HARD, SOFT):
        raise ValueError(f"unknown decision mode {decision_mode!r}")
    size = tuple(size or _input_size(model))
    ordered = sorted(cases, key=lambda c: c.case_id)

    def case_accumulator(case: CaseRef) -> MetricAccumulator:
        batches = BatchGenerator(
            [case], window, batch_size=batch_size, size=size, modalities=modalities
        )
        return run_batches(model, batches)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(case_accumulator, ordered))
    else:
        partials = [case_accumulator(case) for case in ordered]

    total = MetricAccumulator()
    for partial_sums in partials:
        total.merge(partial_sums)

    n_slices = len(ordered) * window.length
    if total.n_samples != n_slices:
        raise RuntimeError(f"evaluated {total.n_samples} slices, expected {n_slices}")

    report = MetricsReport(
        dataset_label=dataset_label,
        partition=partition,
        values=total.result(decision_mode),
        n_cases=len(ordered),
        n_slices=n_slices,
        decision_mode=decision_mode,
        soft_values=total.result(SOFT),
        region_dice=total.region_dice(),
    )
    log_event("evaluated", f"{dataset_label}/{partition}: {len(ordered)} cases, dice={report.values.dice:.4f}")
    return report


@dataclass
class ComparisonTable:
    """
    Reports side by side, one row per report.

    Attributes:
        rows (List[Dict[str, Any]]): Records keyed by REPORT_COLUMNS
        best (Dict[str, Set[int]]): Per metric, the rows holding the best value
        reports (List[MetricsReport]): The compared reports
    """

    rows: List[Dict[str, Any]]
    best: Dict[str, Set[int]]
    reports: List[MetricsReport] = field(default_factory=list)

    columns = REPORT_COLUMNS

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.columns))

    def render(self) -> str:
        """Aligned text; the best value of each metric column is starred."""
        header = ["dataset", "partition", "mode", "cases", "slices"] + list(METRIC_NAMES)
        body = []
        for index, row in enumerate(self.rows):
            cells = [str(row[name]) for name in REPORT_FIELDS]
            for name in METRIC_NAMES:
                mark = "*" if index in self.best[name] else " "
                cells.append(f"{row[name]:.4f}{mark}")
            body.append(cells)

        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(width) for cell, width in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * width for width in widths))
        for cells in body:
            lines.append("  ".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip())
        return "\n".join(lines)


def compare_reports(reports: Sequence[MetricsReport]) -> ComparisonTable:
    """Tabulate reports and flag the best value per metric column.

    Loss is best when lowest, every other metric when highest; ties flag
    every row holding the best value.

    Raises:
        InconsistentColumns: If the reports use different decision modes.
    """
    if not reports:
        raise ValueError("need at least one report to compare")
    modes = {report.decision_mode for report in reports}
    if len(modes) > 1:
        raise InconsistentColumns(
            f"cannot compare reports with different decision modes: {sorted(modes)}"
        )

    rows = [report.record() for report in reports]
    best: Dict[str, Set[int]] = {}
    for name in METRIC_NAMES:
        column = [row[name] for row in rows]
        target = min(column) if name == "loss" else max(column)
        best[name] = {i for i, value in enumerate(column) if value == target}
    return ComparisonTable(rows=rows, best=best, reports=list(reports))


def _details(report: MetricsReport) -> List[str]:
    lines = [f"[{report.dataset_label} / {report.partition}]"]
    if report.soft_values is not None:
        soft = report.soft_values
        lines.append(
            "  soft dice: "
            f"all={soft.dice:.4f} necrotic={soft.dice_necrotic:.4f} "
            f"edema={soft.dice_edema:.4f} enhancing={soft.dice_enhancing:.4f}"
        )
    if report.region_dice:
        regions = " ".join(f"{name}={value:.4f}" for name, value in report.region_dice.items())
        lines.append(f"  region dice: {regions}")
    return lines


def write_report(
    report: Union[MetricsReport, ComparisonTable], out_dir: "str | os.PathLike"
) -> Tuple[Path, Path]:
    """Write report.txt (aligned table) and report.csv (one row per report).

    Raises:
        IoFailure: If the files cannot be written.
    """
    table = report if isinstance(report, ComparisonTable) else compare_reports([report])
    out_dir = Path(out_dir)
    text_path, csv_path = out_dir / REPORT_TEXT, out_dir / REPORT_CSV

    mode = table.reports[0].decision_mode if table.reports else HARD
    lines = [table.render(), "", POOLING_NOTE, DICE_NOTES.get(mode, ""), "* best value per column", ""]
    for item in table.reports:
        lines.extend(_details(item))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        table.to_frame().to_csv(csv_path, index=False, float_format="%.10g")
    except OSError as e:
        raise IoFailure(f"cannot write report to {out_dir}: {e}", str(out_dir)) from e
    log_event("report_written", str(csv_path))
    return text_path, csv_path


def read_report(path: "str | os.PathLike") -> List[MetricsReport]:
    """Read the rows of a report.csv back into reports.

    Raises:
        InconsistentColumns: If the file does not parse or lacks a column.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InconsistentColumns(f"cannot parse report {path}: {e}") from e
    for column in REPORT_COLUMNS:
        if column not in frame.columns:
            raise InconsistentColumns(f"report {path} is missing column {column!r}")
    return [
        MetricsReport(
            dataset_label=str(row["dataset"]),
            partition=str(row["partition"]),
            values=MetricValues.from_dict(row),
            n_cases=int(row["n_cases"]),
            n_slices=int(row["n_slices"]),
            decision_mode=str(row["decision_mode"]),
        )
        for row in frame.to_dict(orient="records")
    ]


# ============================================================================
# Prediction
# ============================================================================


def predict_case(
    model: ModelLike,
    case: CaseRef,
    window: SliceWindow,
    modalities: Sequence[Modality] = DEFAULT_MODALITIES,
    size: Optional[Tuple[int, int]] = None,
    batch_size: int = 8,
) -> LabelVolume:
    """Predict a full-size label volume for one case.

    Each in-window slice is predicted at the network size, turned into
    BraTS labels and resized back to the native in-plane size with
    nearest-neighbour sampling. Slices outside the window are background.

    Returns:
        LabelVolume: uint8 labels in {0, 1, 2, 4}, shaped like the inputs.

    Raises:
        ModalityMissing: If an input modality file is absent.
        WindowOutOfBounds: If the window does not fit the volume.
    """
    predictor = as_predictor(model)
    size = tuple(size or _input_size(model))
    reference = load_modality(case, modalities[0])
    height, width, depth = reference.shape
    window.check_depth(depth)

    labels = np.zeros((height, width, depth), dtype=np.uint8)
    indices = list(window.indices())
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        batch = Batch(
            inputs=np.stack([build_inputs(case, i, window, size, modalities) for i in chunk]),
            targets=None,
            provenance=[(case.case_id, i) for i in chunk],
        )
        classes = predicted_classes(predictor(batch)).astype(np.uint8)
        for slice_classes, index in zip(classes, chunk):
            labels[:, :, index] = resize_slice(
                inverse_remap_labels(slice_classes), (height, width), LABEL
            )
    logger.debug("predicted %d slices of %s", len(indices), case.case_id)
    return LabelVolume(labels, affine=reference.affine)


def prediction_path(case: CaseRef, out_dir: "str | os.PathLike", modality: Modality) -> Path:
    """`<case_id>_pred` with the same extension as the case's input files."""
    source = case.path_for(modality.value)
    extension = next(
        (ext for ext in NIFTI_EXTENSIONS if source is not None and source.name.endswith(ext)),
        ".nii.gz",
    )
    return Path(out_dir) / f"{case.case_id}_{PREDICTION_SUFFIX}{extension}"


def write_prediction(
    labels: LabelVolume,
    case: CaseRef,
    out_dir: "str | os.PathLike",
    modality: Modality = DEFAULT_MODALITIES[0],
) -> Path:
    """Save a predicted label volume next to the case's other outputs."""
    path = save_volume(labels.data, prediction_path(case, out_dir, modality), labels.affine)
    log_event("prediction_written", str(path), case.case_id)
    return path
