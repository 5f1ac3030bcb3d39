"""Tests for the training loop, callbacks and the training log."""

import errno

import numpy as np
import pytest

import trainer
from data_pipeline import BatchGenerator, DatasetSplit
from exceptions import ConfigInvalid, DiskFull, EmptyDataset, InconsistentColumns, ShapeMismatch, UnknownMetric
from metrics import CSV_COLUMNS, METRIC_NAMES, MetricValues
from models import UNetConfig, build_unet, load_checkpoint
from preprocess import SliceWindow
from trainer import (
    BEST_CHECKPOINT,
    CSV_LOG_NAME,
    LAST_CHECKPOINT,
    CONTINUE,
    STOP,
    Callback,
    EpochRecord,
    Hyperparameters,
    TrainingHistory,
    append_csv_log,
    early_stopping_check,
    parameters_snapshot,
    read_csv_log,
    train,
)
from volume_io import Modality, discover_cases


def values(**overrides):
    base = {name: 0.5 for name in METRIC_NAMES}
    base.update(overrides)
    return MetricValues(**base)


def history_of(losses):
    history = TrainingHistory()
    for epoch, loss in enumerate(losses, start=1):
        history.records.append(EpochRecord(epoch, values(), values(loss=loss), seconds=0.0))
    return history


@pytest.fixture
def split(dataset_root):
    cases = discover_cases(dataset_root)
    return DatasetSplit(train=cases[:3], validation=cases[3:4], test=cases[4:], seed=0)


@pytest.fixture
def scripted_validation(monkeypatch):
    """Replace training and validation with a scripted val_loss series."""

    def script(series):
        losses = iter(series)
        monkeypatch.setattr(trainer, "_train_epoch", lambda model, batches, optimizer, device: (values(), 1))
        monkeypatch.setattr(trainer, "_validate", lambda model, batches: values(loss=next(losses)))

    return script


# ============================================================================
# Early stopping
# ============================================================================


def test_early_stopping_waits_for_patience():
    assert early_stopping_check(history_of([1.0, 0.9, 0.95, 0.96]), "val_loss", patience=2) == STOP
    assert early_stopping_check(history_of([1.0, 0.9, 0.95]), "val_loss", patience=2) == CONTINUE


def test_early_stopping_min_delta():
    history = history_of([1.0, 0.999, 0.998])
    assert early_stopping_check(history, "val_loss", patience=2, min_delta=0.01) == STOP
    assert early_stopping_check(history, "val_loss", patience=2) == CONTINUE


def test_early_stopping_higher_is_better_for_dice():
    history = TrainingHistory()
    for epoch, score in enumerate([0.2, 0.5, 0.4, 0.45], start=1):
        history.records.append(EpochRecord(epoch, values(), values(dice=score), seconds=0.0))
    assert early_stopping_check(history, "val_dice", patience=2) == STOP


def test_unknown_monitor():
    with pytest.raises(UnknownMetric):
        early_stopping_check(history_of([1.0]), "val_f1", patience=1)


def test_train_halts_at_best_epoch_plus_patience(tmp_path, split, tiny_config, scripted_validation):
    scripted_validation([1.0, 0.8, 0.9, 0.95, 0.85, 0.7, 0.6])
    hp = Hyperparameters(epochs=10, early_stop_patience=3)
    history = train(build_unet(tiny_config), split, hp, tmp_path, window=SliceWindow(4, 2))

    assert len(history) == 2 + 3
    assert history.metadata["stop_reason"] == "early_stop"
    assert len(read_csv_log(tmp_path / CSV_LOG_NAME)) == 5
    _, best = load_checkpoint(tmp_path / BEST_CHECKPOINT)
    _, last = load_checkpoint(tmp_path / LAST_CHECKPOINT)
    assert (best["epoch"], best["value"]) == (2, 0.8)
    assert last["epoch"] == 5


def test_callbacks_run_in_order(tmp_path, split, tiny_config, scripted_validation, monkeypatch):
    scripted_validation([1.0, 0.9])
    calls = []
    monkeypatch.setattr(trainer, "append_csv_log", lambda record, path: calls.append("csv"))
    monkeypatch.setattr(
        trainer, "checkpoint_if_best", lambda model, history, monitor, out_dir: calls.append("checkpoint")
    )
    monkeypatch.setattr(
        trainer,
        "early_stopping_check",
        lambda history, monitor, patience, min_delta: calls.append("early_stop") or CONTINUE,
    )

    class Recorder(Callback):
        def on_epoch_end(self, model, history):
            calls.append("custom")
            return False

    callbacks = trainer.default_callbacks(Hyperparameters(), tmp_path) + [Recorder()]
    train(build_unet(tiny_config), split, Hyperparameters(epochs=2), tmp_path, SliceWindow(4, 2), callbacks=callbacks)
    assert calls == ["csv", "checkpoint", "early_stop", "custom"] * 2


# ============================================================================
# Training log
# ============================================================================


def test_csv_log_round_trip(tmp_path):
    path = tmp_path / "log.csv"
    records = [
        EpochRecord(1, values(loss=1.0 / 3.0), values(dice=0.123456789), seconds=1.5),
        EpochRecord(2, values(loss=0.2), values(dice=2.0 / 7.0), seconds=1.25),
    ]
    for record in records:
        append_csv_log(record, path)

    frame = read_csv_log(path)
    assert tuple(frame.columns) == CSV_COLUMNS
    for record, (_, row) in zip(records, frame.iterrows()):
        for name, value in record.row().items():
            assert row[name] == pytest.approx(value, abs=1e-6), name


def test_csv_log_missing_column(tmp_path):
    path = tmp_path / "log.csv"
    append_csv_log(EpochRecord(1, values(), values(), seconds=0.0), path)
    frame = read_csv_log(path).drop(columns=["val_dice"])
    frame.to_csv(path, index=False)
    with pytest.raises(InconsistentColumns) as excinfo:
        read_csv_log(path)
    assert "val_dice" in str(excinfo.value)


def test_csv_log_disk_full(tmp_path, monkeypatch):
    def full(*args, **kwargs):
        raise OSError(errno.ENOSPC, "No space left on device")

    monkeypatch.setattr(trainer, "open", full, raising=False)
    with pytest.raises(DiskFull):
        append_csv_log(EpochRecord(1, values(), values(), seconds=0.0), tmp_path / "log.csv")


# ============================================================================
# Training
# ============================================================================


def test_train_records_every_epoch(tmp_path, split, tiny_config, small_window):
    hp = Hyperparameters(epochs=3, learning_rate=5e-3)
    history = train(build_unet(tiny_config), split, hp, tmp_path, window=small_window)

    assert len(history) == 3
    assert [r.steps for r in history.records] == [3 * small_window.length] * 3
    assert history.metadata["seed"] == 0
    assert history.metadata["stop_reason"] == "completed"
    assert (tmp_path / BEST_CHECKPOINT).exists() and (tmp_path / LAST_CHECKPOINT).exists()
    assert list(read_csv_log(tmp_path / CSV_LOG_NAME)["epoch"]) == [1, 2, 3]


def test_training_reduces_loss(tmp_path, split, tiny_config, small_window):
    hp = Hyperparameters(epochs=4, learning_rate=5e-3)
    losses = train(build_unet(tiny_config), split, hp, tmp_path, window=small_window).series("loss")
    assert losses[-1] < losses[0]


def test_zero_learning_rate_freezes_parameters(tmp_path, split, tiny_config, small_window):
    model = build_unet(tiny_config)
    before = parameters_snapshot(model)
    train(model, split, Hyperparameters(epochs=1, learning_rate=0.0), tmp_path, window=small_window)
    for name, value in parameters_snapshot(model).items():
        np.testing.assert_array_equal(value, before[name], err_msg=name)


def test_best_checkpoint_reproduces_monitored_value(tmp_path, split, tiny_config, small_window):
    hp = Hyperparameters(epochs=3, learning_rate=5e-3)
    train(build_unet(tiny_config), split, hp, tmp_path, window=small_window)

    model, metadata = load_checkpoint(tmp_path / BEST_CHECKPOINT)
    batches = BatchGenerator(split.validation, small_window, size=tiny_config.input_size)
    assert trainer._validate(model, batches).loss == pytest.approx(metadata["value"], abs=1e-6)


def test_same_seed_same_log(tmp_path, split, tiny_config, small_window):
    logs = []
    for run in ("a", "b"):
        hp = Hyperparameters(epochs=2, seed=7)
        train(build_unet(tiny_config, seed=7), split, hp, tmp_path / run, window=small_window)
        logs.append(read_csv_log(tmp_path / run / CSV_LOG_NAME).drop(columns=["seconds"]))
    assert logs[0].equals(logs[1])


def test_train_rejects_bad_inputs(tmp_path, split, tiny_config):
    model = build_unet(tiny_config)
    with pytest.raises(ConfigInvalid):
        train(model, split, Hyperparameters(epochs=0), tmp_path)
    with pytest.raises(ShapeMismatch):
        train(model, split, Hyperparameters(epochs=1), tmp_path, modalities=(Modality.FLAIR,))
    empty = DatasetSplit(train=split.train, validation=[], test=[], seed=0)
    with pytest.raises(EmptyDataset):
        train(model, empty, Hyperparameters(epochs=1), tmp_path)


def test_single_channel_model_trains(tmp_path, split, small_window):
    config = UNetConfig(in_channels=1, base_features=2, depth=1, input_size=(8, 8))
    history = train(
        build_unet(config), split, Hyperparameters(epochs=1), tmp_path, small_window, modalities=(Modality.T1CE,)
    )
    assert len(history) == 1


@pytest.mark.slow
def test_overfits_eight_slices(tmp_path, synthetic_case):
    from evaluation import evaluate
    from metrics import HARD

    window = SliceWindow(start=4, length=8)
    config = UNetConfig(in_channels=2, base_features=16, depth=2, input_size=(32, 32))
    model = build_unet(config, seed=0)
    split = DatasetSplit(train=[synthetic_case], validation=[synthetic_case], test=[], seed=0)
    hp = Hyperparameters(epochs=200, batch_size=1, learning_rate=1e-3, early_stop_patience=200)

    train(model, split, hp, tmp_path / "run", window=window)
    report = evaluate(model, [synthetic_case], window, partition="train", decision_mode=HARD)
    per_class = [report.values.dice_necrotic, report.values.dice_edema, report.values.dice_enhancing]

    assert report.n_slices == 8
    assert np.mean(per_class) > 0.95
    assert report.values.dice == pytest.approx(np.mean(per_class))
