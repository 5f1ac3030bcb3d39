"""Tests for profiles, run files and config validation."""

import pytest

import app_config
from app_config import RunConfig
from exceptions import ConfigError, ConfigInvalid, UnknownMetric
from models import UNetConfig
from preprocess import SliceWindow
from volume_io import Modality


def test_testing_profile():
    config = RunConfig.from_profile("testing")
    assert config.epochs == app_config.TestingConfig.EPOCHS
    assert config.input_size == (32, 32)
    assert config.input_modalities == (Modality.FLAIR, Modality.T1CE)
    assert config.split_ratios == (0.68, 0.2, 0.12)


def test_published_profile_matches_published_settings():
    config = RunConfig.from_profile("published")
    assert (config.epochs, config.batch_size, config.learning_rate) == (235, 1, 1e-3)
    assert config.unet_config() == UNetConfig(in_channels=2, num_classes=4, base_features=32, depth=4)
    assert config.window() == SliceWindow(22, 100)


def test_unknown_profile():
    with pytest.raises(ConfigError):
        RunConfig.from_profile("staging")


def test_environment_overrides_profile(monkeypatch):
    monkeypatch.setenv("BRATS_EPOCHS", "7")
    monkeypatch.setenv("BRATS_PROFILE", "testing")
    config = RunConfig.from_profile()
    assert config.epochs == 7
    assert config.depth == app_config.TestingConfig.DEPTH


def test_snapshot_round_trip(tmp_path):
    config = RunConfig.resolve("testing", overrides={"seed": "11", "learning_rate": "0.0005"})
    path = config.to_file(tmp_path / "run.cfg")

    assert "# assumed defaults" in path.read_text()
    assert RunConfig.from_file(path) == config


def test_file_then_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs=5\nbatch_size=2\n")
    config = RunConfig.resolve("testing", path, {"epochs": "9"})
    assert (config.epochs, config.batch_size) == (9, 2)


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs=5\ndropout=0.5\n")
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_file(path)
    assert "dropout" in str(excinfo.value)


def test_missing_file_is_a_usage_error(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "absent.cfg")


@pytest.mark.parametrize(
    "overrides",
    [
        {"epochs": "many"},
        {"input_modalities": "flair,dwi"},
        {"split_ratios": "0.5,0.5,0.5"},
        {"partition": "holdout"},
        {"decision_mode": "fuzzy"},
        {"input_size": "30,30"},
        {"window_length": "0"},
    ],
)
def test_invalid_values(overrides):
    with pytest.raises(ConfigInvalid):
        RunConfig.resolve("testing", overrides=overrides)


def test_unknown_monitor():
    with pytest.raises(UnknownMetric):
        RunConfig.resolve("testing", overrides={"monitor": "val_f1"})


def test_channels_follow_modalities():
    config = RunConfig.resolve("testing", overrides={"input_modalities": "t1,t1ce,t2"})
    assert config.unet_config().in_channels == 3
    assert config.input_size == (32, 32)


def test_size_accepts_x_separator():
    assert RunConfig.resolve("testing", overrides={"input_size": "64x64"}).input_size == (64, 64)
