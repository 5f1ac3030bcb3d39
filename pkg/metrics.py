"""
Segmentation metrics.

All functions take channels-last arrays: a one-hot target and class
probabilities of the same shape (..., C). Counts are one-vs-rest per class.
Ratios whose numerator and denominator are both zero score 1, so blank
slices count as perfect agreement on absence.
"""

from dataclasses import asdict, dataclass, fields
from functools import partial
from typing import Dict, Tuple

import numpy as np

from exceptions import InvalidTarget, ShapeMismatch

CLIP_EPSILON = 1e-7
DICE_EPSILON = 1e-6
THRESHOLD = 0.5

ARGMAX = "argmax"
THRESHOLD_MODE = "threshold"
SOFT = "soft"
HARD = "hard"

# Channel of each named class after label remapping.
CLASS_CHANNELS = {"necrotic": 1, "edema": 2, "enhancing": 3}
# Composite tumor regions as sets of remapped classes.
REGION_CLASSES = {"whole": (1, 2, 3), "core": (1, 3), "enhancing": (3,)}


@dataclass
class ConfusionCounts:
    """
    Per-class one-vs-rest counts.

    Attributes:
        tp, fp, fn, tn (np.ndarray): (C,) int64 arrays
    """

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(*(np.zeros(num_classes, dtype=np.int64) for _ in range(4)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricValues:
    """The loss and the nine monitored metrics, in CSV column order."""

    loss: float
    accuracy: float
    mean_iou: float
    precision: float
    sensitivity: float
    specificity: float
    dice: float
    dice_necrotic: float
    dice_edema: float
    dice_enhancing: float

    def as_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: Dict[str, float]) -> "MetricValues":
        return cls(**{name: float(values[name]) for name in METRIC_NAMES})


METRIC_NAMES = tuple(f.name for f in fields(MetricValues))
VALIDATION_NAMES = tuple(f"val_{name}" for name in METRIC_NAMES)
# Column order of the training log.
CSV_COLUMNS = ("epoch",) + METRIC_NAMES + VALIDATION_NAMES + ("seconds",)


def _ratio(numerator, denominator) -> float:
    """numerator / denominator with 0/0 defined as 1."""
    if denominator == 0:
        return 1.0
    return float(numerator) / float(denominator)


def _check_pair(target: np.ndarray, probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    target = np.asarray(target)
    probs = np.asarray(probs)
    if target.shape != probs.shape or target.ndim < 1:
        raise ShapeMismatch(f"target {target.shape} and probs {probs.shape} differ")
    return target, probs


def _check_one_hot(target: np.ndarray) -> np.ndarray:
    hot = target.astype(bool)
    if not np.all((target == 0) | (target == 1)) or not np.all(hot.sum(axis=-1) == 1):
        raise InvalidTarget("target is not a valid one-hot encoding")
    return hot


def predicted_classes(probs: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis; ties go to the lowest class index."""
    return np.argmax(probs, axis=-1)


# ============================================================================
# Counting
# ============================================================================


def confusion_counts(
    target: np.ndarray,
    probs: np.ndarray,
    decision: str = ARGMAX,
    threshold: float = THRESHOLD,
) -> ConfusionCounts:
    """Per-class TP/FP/FN/TN of a prediction.

    Args:
        target (np.ndarray): (..., C) one-hot.
        probs (np.ndarray): (..., C) probabilities or hard predictions.
        decision (str): "argmax" predicts one class per pixel; "threshold"
            binarizes each channel independently at `threshold`.
        threshold (float): Cut-off for threshold mode (strictly greater).

    Raises:
        ShapeMismatch: If the shapes differ.
        InvalidTarget: If the target is not one-hot.
    """
    target, probs = _check_pair(target, probs)
    actual = _check_one_hot(target)
    num_classes = target.shape[-1]
    if decision == ARGMAX:
        predicted = np.eye(num_classes, dtype=bool)[predicted_classes(probs)]
    elif decision == THRESHOLD_MODE:
        predicted = probs > threshold
    else:
        raise ValueError(f"unknown decision mode {decision!r}")

    axes = tuple(range(target.ndim - 1))
    tp = np.sum(actual & predicted, axis=axes, dtype=np.int64)
    fp = np.sum(~actual & predicted, axis=axes, dtype=np.int64)
    fn = np.sum(actual & ~predicted, axis=axes, dtype=np.int64)
    total = np.int64(actual[..., 0].size)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=total - tp - fp - fn)


# ============================================================================
# Overlap metrics
# ============================================================================


def _channels(class_filter: str, num_classes: int) -> Tuple[int, ...]:
    if class_filter == "all":
        return tuple(range(num_classes))
    try:
        return (CLASS_CHANNELS[class_filter],)
    except KeyError as e:
        raise ValueError(f"unknown class filter {class_filter!r}") from e


def dice(
    target: np.ndarray,
    probs: np.ndarray,
    class_filter: str = "all",
    eps: float = DICE_EPSILON,
) -> float:
    """Soft dice, (2 * sum(t * p) + eps) / (sum(t^2) + sum(p^2) + eps).

    "all" pools the four channels together; "necrotic", "edema" and
    "enhancing" restrict the sums to channel 1, 2 or 3.
    """
    target, probs = _check_pair(target, probs)
    if eps <= 0:
        raise ValueError("eps must be positive")
    channels = list(_channels(class_filter, target.shape[-1]))
    t = target[..., channels].astype(np.float64)
    p = probs[..., channels].astype(np.float64)
    return float((2.0 * np.sum(t * p) + eps) / (np.sum(t * t) + np.sum(p * p) + eps))


def hard_dice(counts: ConfusionCounts, class_filter: str = "all") -> float:
    """2TP / (2TP + FP + FN) pooled over the filtered classes; empty scores 1."""
    channels = list(_channels(class_filter, len(counts.tp)))
    tp = counts.tp[channels].sum()
    return _ratio(2 * tp, 2 * tp + counts.fp[channels].sum() + counts.fn[channels].sum())


def mean_hard_dice(counts: ConfusionCounts) -> float:
    """Unweighted mean of the necrotic, edema and enhancing hard dice.

    Pooling all four channels instead would equal categorical accuracy,
    since every wrong pixel is one FP and one FN.
    """
    return float(np.mean([hard_dice(counts, name) for name in CLASS_CHANNELS]))


def iou_per_class(counts: ConfusionCounts) -> np.ndarray:
    """TP / (TP + FP + FN) per class; classes with an empty union score 1."""
    return np.array(
        [_ratio(tp, tp + fp + fn) for tp, fp, fn in zip(counts.tp, counts.fp, counts.fn)]
    )


def mean_iou(target: np.ndarray, probs: np.ndarray, num_classes: int = 4) -> float:
    """Mean over classes of the argmax IoU."""
    target, probs = _check_pair(target, probs)
    if target.shape[-1] != num_classes:
        raise ShapeMismatch(f"expected {num_classes} channels, got {target.shape[-1]}")
    return float(iou_per_class(confusion_counts(target, probs, ARGMAX)).mean())


def pixel_metrics(counts: ConfusionCounts) -> Tuple[float, float, float, float]:
    """Micro-averaged (accuracy, precision, sensitivity, specificity).

    Sums TP, FP, FN and TN over classes before dividing; 0/0 scores 1.
    """
    tp, fp, fn, tn = (int(a.sum()) for a in (counts.tp, counts.fp, counts.fn, counts.tn))
    return (
        _ratio(tp + tn, tp + fp + fn + tn),
        _ratio(tp, tp + fp),
        _ratio(tp, tp + fn),
        _ratio(tn, tn + fp),
    )


def categorical_accuracy(target: np.ndarray, probs: np.ndarray) -> float:
    """Fraction of pixels whose argmax class matches the target."""
    target, probs = _check_pair(target, probs)
    return float(np.mean(predicted_classes(probs) == np.argmax(target, axis=-1)))


def categorical_cross_entropy(target: np.ndarray, probs: np.ndarray) -> float:
    """Mean over pixels of -sum_c t_c * log(p_c), with p clipped to [1e-7, 1 - 1e-7]."""
    target, probs = _check_pair(target, probs)
    clipped = np.clip(probs.astype(np.float64), CLIP_EPSILON, 1.0 - CLIP_EPSILON)
    return float(np.mean(-np.sum(target * np.log(clipped), axis=-1)))


# ============================================================================
# Accumulation
# ============================================================================


class MetricAccumulator:
    """
    Pixel-pooled accumulation of every reported metric over many batches.

    Sums are kept in float64 and integer counts in int64, so the result
    depends only on the multiset of pixels, up to float rounding.
    """

    def __init__(self, num_classes: int = 4, eps: float = DICE_EPSILON):
        self.num_classes = num_classes
        self.eps = eps
        self.argmax_counts = ConfusionCounts.zeros(num_classes)
        self.threshold_counts = ConfusionCounts.zeros(num_classes)
        self.region_counts = {name: np.zeros(3, dtype=np.int64) for name in REGION_CLASSES}
        self.sum_tp = np.zeros(num_classes)
        self.sum_tt = np.zeros(num_classes)
        self.sum_pp = np.zeros(num_classes)
        self.ce_sum = 0.0
        self.n_pixels = 0
        self.n_samples = 0

    def update(self, target: np.ndarray, probs: np.ndarray) -> None:
        """Add a batch of (B, h, w, C) targets and probabilities."""
        target, probs = _check_pair(target, probs)
        if target.shape[-1] != self.num_classes:
            raise ShapeMismatch(f"expected {self.num_classes} channels, got {target.shape[-1]}")
        self.argmax_counts = self.argmax_counts + confusion_counts(target, probs, ARGMAX)
        self.threshold_counts = self.threshold_counts + confusion_counts(
            target, probs, THRESHOLD_MODE
        )

        actual = np.argmax(target, axis=-1)
        predicted = predicted_classes(probs)
        for name, classes in REGION_CLASSES.items():
            a, p = np.isin(actual, classes), np.isin(predicted, classes)
            self.region_counts[name] += [
                np.count_nonzero(a & p),
                np.count_nonzero(~a & p),
                np.count_nonzero(a & ~p),
            ]

        axes = tuple(range(target.ndim - 1))
        t = target.astype(np.float64)
        p = probs.astype(np.float64)
        self.sum_tp += np.sum(t * p, axis=axes)
        self.sum_tt += np.sum(t * t, axis=axes)
        self.sum_pp += np.sum(p * p, axis=axes)

        pixels = int(np.prod(target.shape[:-1]))
        self.ce_sum += categorical_cross_entropy(target, probs) * pixels
        self.n_pixels += pixels
        self.n_samples += target.shape[0] if target.ndim == 4 else 1

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        """Fold another accumulator's sums into this one and return self."""
        if other.num_classes != self.num_classes:
            raise ShapeMismatch("cannot merge accumulators with different class counts")
        self.argmax_counts = self.argmax_counts + other.argmax_counts
        self.threshold_counts = self.threshold_counts + other.threshold_counts
        for name in REGION_CLASSES:
            self.region_counts[name] += other.region_counts[name]
        self.sum_tp += other.sum_tp
        self.sum_tt += other.sum_tt
        self.sum_pp += other.sum_pp
        self.ce_sum += other.ce_sum
        self.n_pixels += other.n_pixels
        self.n_samples += other.n_samples
        return self

    def _soft_dice(self, class_filter: str) -> float:
        channels = list(_channels(class_filter, self.num_classes))
        numerator = 2.0 * self.sum_tp[channels].sum() + self.eps
        return float(
            numerator / (self.sum_tt[channels].sum() + self.sum_pp[channels].sum() + self.eps)
        )

    def region_dice(self) -> Dict[str, float]:
        """Hard dice of the whole, core and enhancing tumor regions."""
        return {
            name: _ratio(2 * tp, 2 * tp + fp + fn)
            for name, (tp, fp, fn) in self.region_counts.items()
        }

    def result(self, decision_mode: str = SOFT) -> MetricValues:
        """Metric values over everything accumulated so far.

        Args:
            decision_mode (str): "soft" reports dice on probabilities, with
                the headline pooled over all channels; "hard" reports dice on
                argmax decisions, with the headline the mean of the three
                tumor classes.
        """
        if self.n_pixels == 0:
            raise ValueError("no batches accumulated")
        if decision_mode == SOFT:
            dice_of = self._soft_dice
            headline = dice_of("all")
        elif decision_mode == HARD:
            dice_of = partial(hard_dice, self.argmax_counts)
            headline = mean_hard_dice(self.argmax_counts)
        else:
            raise ValueError(f"unknown decision mode {decision_mode!r}")

        _, precision, sensitivity, specificity = pixel_metrics(self.threshold_counts)
        return MetricValues(
            loss=self.ce_sum / self.n_pixels,
            accuracy=float(self.argmax_counts.tp.sum()) / self.n_pixels,
            mean_iou=float(iou_per_class(self.argmax_counts).mean()),
            precision=precision,
            sensitivity=sensitivity,
            specificity=specificity,
            dice=headline,
            dice_necrotic=dice_of("necrotic"),
            dice_edema=dice_of("edema"),
            dice_enhancing=dice_of("enhancing"),
        )
