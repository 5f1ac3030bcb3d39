"""Tests for confusion counts, overlap metrics and the accumulator."""

import numpy as np
import pytest

from conftest import random_one_hot, random_probs
from exceptions import InvalidTarget, ShapeMismatch
from metrics import (
    ARGMAX,
    CSV_COLUMNS,
    DICE_EPSILON,
    HARD,
    METRIC_NAMES,
    SOFT,
    THRESHOLD_MODE,
    ConfusionCounts,
    MetricAccumulator,
    categorical_accuracy,
    categorical_cross_entropy,
    confusion_counts,
    dice,
    hard_dice,
    mean_hard_dice,
    iou_per_class,
    mean_iou,
    pixel_metrics,
)

CLASS_FILTERS = {"all": (0, 1, 2, 3), "necrotic": (1,), "edema": (2,), "enhancing": (3,)}


def enumerate_counts(actual, predicted, num_classes=4):
    """Per-class one-vs-rest counts by visiting every pixel."""
    counts = {key: [0] * num_classes for key in ("tp", "fp", "fn", "tn")}
    for a, p in zip(actual.ravel(), predicted.ravel()):
        for c in range(num_classes):
            if a == c and p == c:
                counts["tp"][c] += 1
            elif a != c and p == c:
                counts["fp"][c] += 1
            elif a == c and p != c:
                counts["fn"][c] += 1
            else:
                counts["tn"][c] += 1
    return counts


def oracle_ratio(numerator, denominator):
    return 1.0 if denominator == 0 else numerator / denominator


def test_metrics_match_pixel_enumeration(rng):
    for _ in range(1000):
        h, w = rng.integers(1, 9, size=2)
        actual = rng.integers(0, 4, size=(h, w))
        predicted = rng.integers(0, 4, size=(h, w))
        target, hard = np.eye(4)[actual], np.eye(4)[predicted]
        expected = enumerate_counts(actual, predicted)

        counts = confusion_counts(target, hard, ARGMAX)
        for key in ("tp", "fp", "fn", "tn"):
            np.testing.assert_array_equal(getattr(counts, key), expected[key])

        for name, channels in CLASS_FILTERS.items():
            tp = sum(expected["tp"][c] for c in channels)
            fp = sum(expected["fp"][c] for c in channels)
            fn = sum(expected["fn"][c] for c in channels)
            soft = (2 * tp + DICE_EPSILON) / (2 * tp + fp + fn + DICE_EPSILON)
            assert dice(target, hard, name) == pytest.approx(soft, abs=1e-6)
            assert hard_dice(counts, name) == pytest.approx(oracle_ratio(2 * tp, 2 * tp + fp + fn), abs=1e-6)

        ious = [
            oracle_ratio(expected["tp"][c], expected["tp"][c] + expected["fp"][c] + expected["fn"][c])
            for c in range(4)
        ]
        np.testing.assert_allclose(iou_per_class(counts), ious, atol=1e-6)
        assert mean_iou(target, hard) == pytest.approx(np.mean(ious), abs=1e-6)

        tp, fp, fn, tn = (sum(expected[k]) for k in ("tp", "fp", "fn", "tn"))
        accuracy, precision, sensitivity, specificity = pixel_metrics(counts)
        assert accuracy == pytest.approx((tp + tn) / (tp + fp + fn + tn), abs=1e-6)
        assert precision == pytest.approx(oracle_ratio(tp, tp + fp), abs=1e-6)
        assert sensitivity == pytest.approx(oracle_ratio(tp, tp + fn), abs=1e-6)
        assert specificity == pytest.approx(oracle_ratio(tn, tn + fp), abs=1e-6)
        assert categorical_accuracy(target, hard) == pytest.approx(np.mean(actual == predicted))


def test_perfect_prediction():
    target = np.eye(4)[np.array([[0, 1], [2, 3]])]
    assert dice(target, target) == pytest.approx(1.0)
    assert mean_iou(target, target) == 1.0
    assert categorical_cross_entropy(target, target) == pytest.approx(0.0, abs=1e-6)


def test_absent_class_scores_one():
    target = np.eye(4)[np.zeros((3, 3), dtype=int)]
    counts = confusion_counts(target, target)
    assert hard_dice(counts, "enhancing") == 1.0
    assert dice(target, target, "necrotic") == pytest.approx(1.0)
    np.testing.assert_array_equal(iou_per_class(counts), [1.0, 1.0, 1.0, 1.0])


def test_threshold_decision_is_strict():
    target = np.array([[1.0, 0.0]])
    probs = np.array([[0.5, 0.5]])
    counts = confusion_counts(target, probs, THRESHOLD_MODE)
    assert counts.tp.sum() == 0
    assert counts.fn[0] == 1


def test_argmax_ties_pick_lowest_class():
    target = np.array([[0.0, 1.0]])
    counts = confusion_counts(target, np.array([[0.5, 0.5]]), ARGMAX)
    np.testing.assert_array_equal(counts.tp, [0, 0])
    np.testing.assert_array_equal(counts.fp, [1, 0])


def test_cross_entropy_clips_zero_probabilities():
    target = np.array([[1.0, 0.0]])
    loss = categorical_cross_entropy(target, np.array([[0.0, 1.0]]))
    assert loss == pytest.approx(-np.log(1e-7))


def test_shape_and_target_validation():
    with pytest.raises(ShapeMismatch):
        dice(np.zeros((2, 4)), np.zeros((3, 4)))
    with pytest.raises(InvalidTarget):
        confusion_counts(np.array([[1.0, 1.0]]), np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        dice(np.eye(4), np.eye(4), "tumor")


# ============================================================================
# Accumulator
# ============================================================================


def test_accumulator_equals_pooled_metrics(rng):
    targets = random_one_hot(rng, (3, 6, 6))
    probs = random_probs(rng, (3, 6, 6))
    accumulator = MetricAccumulator()
    for t, p in zip(targets, probs):
        accumulator.update(t[None], p[None])
    values = accumulator.result(SOFT)

    assert values.loss == pytest.approx(categorical_cross_entropy(targets, probs))
    assert values.dice == pytest.approx(dice(targets, probs))
    assert values.dice_edema == pytest.approx(dice(targets, probs, "edema"))
    assert values.accuracy == pytest.approx(categorical_accuracy(targets, probs))
    assert values.mean_iou == pytest.approx(mean_iou(targets, probs))
    assert accumulator.n_samples == 3


def test_accumulator_hard_mode_uses_argmax(rng):
    targets = random_one_hot(rng, (2, 5, 5))
    probs = random_probs(rng, (2, 5, 5))
    accumulator = MetricAccumulator()
    accumulator.update(targets, probs)
    counts = confusion_counts(targets, probs, ARGMAX)
    assert accumulator.result(HARD).dice_necrotic == pytest.approx(hard_dice(counts, "necrotic"))


def test_accumulator_merge_matches_single_pass(rng):
    targets = random_one_hot(rng, (4, 5, 5))
    probs = random_probs(rng, (4, 5, 5))
    whole = MetricAccumulator()
    whole.update(targets, probs)
    first, second = MetricAccumulator(), MetricAccumulator()
    first.update(targets[:1], probs[:1])
    second.update(targets[1:], probs[1:])

    merged = first.merge(second).result(HARD).as_dict()
    for name, value in whole.result(HARD).as_dict().items():
        assert merged[name] == pytest.approx(value, abs=1e-12), name


def test_uniform_random_accuracy_is_a_quarter(rng):
    targets = random_one_hot(rng, (4, 64, 64))
    guesses = np.eye(4)[rng.integers(0, 4, size=(4, 64, 64))]
    accumulator = MetricAccumulator()
    accumulator.update(targets, guesses)
    assert accumulator.result(HARD).accuracy == pytest.approx(0.25, abs=0.03)


def test_region_dice_of_a_perfect_prediction(rng):
    targets = random_one_hot(rng, (2, 4, 4))
    accumulator = MetricAccumulator()
    accumulator.update(targets, targets)
    assert accumulator.region_dice() == {"whole": 1.0, "core": 1.0, "enhancing": 1.0}


def test_empty_accumulator_has_no_result():
    with pytest.raises(ValueError):
        MetricAccumulator().result()


def test_csv_column_contract():
    assert CSV_COLUMNS[0] == "epoch" and CSV_COLUMNS[-1] == "seconds"
    assert METRIC_NAMES == (
        "loss",
        "accuracy",
        "mean_iou",
        "precision",
        "sensitivity",
        "specificity",
        "dice",
        "dice_necrotic",
        "dice_edema",
        "dice_enhancing",
    )
    assert CSV_COLUMNS[1:-1] == METRIC_NAMES + tuple(f"val_{n}" for n in METRIC_NAMES)


# ============================================================================
# Worked examples
# ============================================================================


def two_by_two():
    """Target classes [[0,1],[2,3]] against predicted classes [[0,1],[2,2]]."""
    target = np.eye(4)[np.array([[0, 1], [2, 3]])]
    predicted = np.eye(4)[np.array([[0, 1], [2, 2]])]
    return target, predicted


def test_two_by_two_confusion_counts():
    counts = confusion_counts(*two_by_two())
    assert (counts.tp[3], counts.fn[3], counts.fp[3], counts.tn[3]) == (0, 1, 0, 3)
    assert (counts.tp[2], counts.fp[2], counts.fn[2], counts.tn[2]) == (1, 1, 0, 2)


def test_hard_headline_dice_is_not_accuracy():
    target, predicted = two_by_two()
    accumulator = MetricAccumulator()
    accumulator.update(target[None], predicted[None])
    values = accumulator.result(HARD)

    assert values.accuracy == pytest.approx(0.75)
    assert (values.dice_necrotic, values.dice_edema, values.dice_enhancing) == pytest.approx((1.0, 2 / 3, 0.0))
    assert values.dice == pytest.approx((1.0 + 2 / 3 + 0.0) / 3)
    assert values.dice == pytest.approx(mean_hard_dice(confusion_counts(target, predicted)))
    assert values.dice != pytest.approx(values.accuracy)


def test_hard_headline_dice_on_mostly_correct_predictions(rng):
    actual = rng.choice(4, size=(4, 16, 16), p=[0.85, 0.05, 0.05, 0.05])
    predicted = np.where(rng.random(actual.shape) < 0.8, actual, (actual + 1) % 4)
    accumulator = MetricAccumulator()
    accumulator.update(np.eye(4)[actual], np.eye(4)[predicted])
    values = accumulator.result(HARD)

    per_class = (values.dice_necrotic, values.dice_edema, values.dice_enhancing)
    assert values.dice == pytest.approx(np.mean(per_class))
    assert values.accuracy == pytest.approx(0.8, abs=0.05)
    assert values.dice < values.accuracy - 0.1


def test_dice_of_two_hits_one_miss_one_false_alarm():
    # Edema channel: TP=2, FP=1, FN=1.
    target = np.eye(4)[np.array([2, 2, 2, 0])]
    predicted = np.eye(4)[np.array([2, 2, 0, 2])]
    counts = confusion_counts(target, predicted)
    assert (counts.tp[2], counts.fp[2], counts.fn[2]) == (2, 1, 1)
    assert hard_dice(counts, "edema") == pytest.approx(0.6667, abs=1e-4)
    assert dice(target, predicted, "edema") == pytest.approx(0.6667, abs=1e-4)
    assert iou_per_class(counts)[2] == pytest.approx(0.5)


def counts_of(tp, fp, fn, tn):
    return ConfusionCounts(*(np.array(values, dtype=np.int64) for values in (tp, fp, fn, tn)))


def test_mean_iou_with_two_absent_classes():
    # Class 0 has IoU 1.0, class 1 has IoU 0.5, classes 2 and 3 are neither present nor predicted.
    counts = counts_of(tp=[4, 1, 0, 0], fp=[0, 0, 0, 0], fn=[0, 1, 0, 0], tn=[2, 4, 6, 6])
    np.testing.assert_allclose(iou_per_class(counts), [1.0, 0.5, 1.0, 1.0])
    assert iou_per_class(counts).mean() == pytest.approx(0.875)


def test_pixel_metrics_by_hand():
    counts = counts_of(tp=[3], fp=[1], fn=[0], tn=[4])
    assert pixel_metrics(counts) == pytest.approx((0.875, 0.75, 1.0, 0.8))


def test_cross_entropy_by_hand():
    target = np.array([[0.0, 1.0, 0.0, 0.0]])
    assert categorical_cross_entropy(target, np.array([[0.1, 0.7, 0.1, 0.1]])) == pytest.approx(0.35667, abs=1e-5)
    uniform = np.full((3, 3, 4), 0.25)
    assert categorical_cross_entropy(np.eye(4)[np.zeros((3, 3), dtype=int)], uniform) == pytest.approx(np.log(4))
