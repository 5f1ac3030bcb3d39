"""Shared fixtures: synthetic cases, dataset roots and tiny model configs."""

import os

import numpy as np
import pytest

from models import UNetConfig
from preprocess import SliceWindow
from volume_io import generate_synthetic_case, generate_synthetic_dataset

CASE_SHAPE = (32, 32, 16)
DATASET_SHAPE = (24, 24, 12)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep BRATS_* variables of the developer shell out of the tests."""
    for name in list(os.environ):
        if name.startswith("BRATS_"):
            monkeypatch.delenv(name)


@pytest.fixture
def synthetic_case(tmp_path):
    return generate_synthetic_case(0, tmp_path / "data", shape=CASE_SHAPE)


@pytest.fixture
def dataset_root(tmp_path):
    root = tmp_path / "data"
    generate_synthetic_dataset(0, root, n_cases=5, shape=DATASET_SHAPE)
    return root


@pytest.fixture
def small_window():
    # The synthetic tumor sits around the middle slice.
    return SliceWindow(start=4, length=4)


@pytest.fixture
def tiny_config():
    return UNetConfig(in_channels=2, num_classes=4, base_features=2, depth=2, input_size=(16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probs(rng, shape, num_classes=4):
    """Random per-pixel probability vectors."""
    logits = rng.normal(size=(*shape, num_classes))
    exp = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return exp / exp.sum(axis=-1, keepdims=True)


def random_one_hot(rng, shape, num_classes=4):
    return np.eye(num_classes)[rng.integers(0, num_classes, size=shape)]
