"""
Configuration module for segmentation runs.

This module defines configuration profiles for different scales:
- Development: Desk-scale runs on a laptop CPU
- Testing: Tiny models and windows for the test suite
- Published: The full-scale reproduction settings

A run is resolved from a profile, then BRATS_* environment variables,
then a flat key=value run file, then command-line flags.
"""

# pylint: disable=too-few-public-methods

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from data_pipeline import PUBLISHED_RATIOS, RATIO_TOLERANCE
from exceptions import ConfigError, ConfigInvalid, IoFailure, ModalityMissing
from metrics import HARD, SOFT
from models import UNetConfig
from preprocess import NUM_CLASSES, SliceWindow
from trainer import ASSUMED_DEFAULTS, Hyperparameters
from volume_io import Modality

load_dotenv()

ENV_PREFIX = "BRATS_"
PARTITIONS = ("train", "validation", "test", "all")
DECISION_MODES = (HARD, SOFT)


class BaseConfig:
    """Base configuration with the published training settings."""

    DATA_ROOT = "data"
    OUTPUT_DIR = "runs"
    INPUT_MODALITIES = "flair,t1ce"
    WINDOW_START = 22
    WINDOW_LENGTH = 100
    BASE_FEATURES = 32
    DEPTH = 4
    INPUT_SIZE = "128,128"
    EPOCHS = 235
    BATCH_SIZE = 1
    LEARNING_RATE = 1e-3
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-7
    EARLY_STOP_PATIENCE = 10
    EARLY_STOP_MIN_DELTA = 0.0
    MONITOR = "val_loss"
    SEED = 0
    SPLIT_RATIOS = ",".join(str(r) for r in PUBLISHED_RATIOS)
    PARTITION = "test"
    DECISION_MODE = HARD
    DEVICE = "cpu"


class DevelopmentConfig(BaseConfig):
    """Desk-scale settings that train in minutes on a CPU."""

    BASE_FEATURES = 8
    DEPTH = 3
    INPUT_SIZE = "64,64"
    EPOCHS = 20


class TestingConfig(BaseConfig):
    """Tiny settings for the test suite."""

    WINDOW_START = 2
    WINDOW_LENGTH = 4
    BASE_FEATURES = 4
    DEPTH = 2
    INPUT_SIZE = "32,32"
    EPOCHS = 2


class PublishedConfig(BaseConfig):
    """Full-scale reproduction on the BraTS releases."""

    EPOCHS = 235
    BATCH_SIZE = 1


# Configuration dictionary
config = {
    "development": DevelopmentConfig,
    "testing": TestingConfig,
    "published": PublishedConfig,
    "default": DevelopmentConfig,
}


def default_profile() -> str:
    return os.environ.get(f"{ENV_PREFIX}PROFILE") or "default"


# ============================================================================
# Value parsing
# ============================================================================


def _comma_separated(value: str) -> list:
    return [part.strip() for part in str(value).replace("x", ",").split(",") if part.strip()]


def _parse_modalities(value: str) -> Tuple[Modality, ...]:
    try:
        return tuple(Modality.parse(part) for part in str(value).split(",") if part.strip())
    except ModalityMissing as e:
        raise ConfigInvalid(str(e)) from e


def _parse_size(value: str) -> Tuple[int, int]:
    return tuple(int(part) for part in _comma_separated(value))


def _parse_ratios(value: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in str(value).split(",") if part.strip())


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(item) for item in value)
    if isinstance(value, Modality):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key(parse: Callable[[str], Any], help_text: str, **kwargs) -> Any:
    return field(metadata={"parse": parse, "help": help_text}, **kwargs)


@dataclass(frozen=True)
class RunConfig:
    """
    Every setting of a run, one field per config key and CLI flag.

    The flag of a key is the key with dashes: window_start <-> --window-start.
    """

    data_root: Path = _key(Path, "dataset root holding one directory per case")
    output_dir: Path = _key(Path, "directory for logs, checkpoints and reports")
    input_modalities: Tuple[Modality, ...] = _key(
        _parse_modalities, "comma-separated input modalities, e.g. flair,t1ce"
    )
    window_start: int = _key(int, "first axial slice used from each volume")
    window_length: int = _key(int, "number of axial slices used per volume")
    base_features: int = _key(int, "width of the first encoder level")
    depth: int = _key(int, "number of down-sampling steps")
    input_size: Tuple[int, int] = _key(_parse_size, "network input size h,w")
    epochs: int = _key(int, "maximum number of training epochs")
    batch_size: int = _key(int, "slices per optimizer step")
    learning_rate: float = _key(float, "Adam learning rate")
    adam_beta1: float = _key(float, "Adam beta1")
    adam_beta2: float = _key(float, "Adam beta2")
    adam_eps: float = _key(float, "Adam epsilon")
    early_stop_patience: int = _key(int, "epochs without improvement before stopping")
    early_stop_min_delta: float = _key(float, "smallest change counted as improvement")
    monitor: str = _key(str, "logged metric driving early stopping and checkpoints")
    seed: int = _key(int, "seed for the split, initialization and shuffling")
    split_ratios: Tuple[float, ...] = _key(_parse_ratios, "train,validation,test fractions")
    partition: str = _key(str, "partition to evaluate: train, validation, test or all")
    decision_mode: str = _key(str, "headline dice of reports: hard or soft")
    device: str = _key(str, "torch device")

    # ------------------------------------------------------------------
    # Resolution
    # ------------------------------------------------------------------

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def help_for(cls, key: str) -> str:
        return next(f.metadata["help"] for f in fields(cls) if f.name == key)

    @classmethod
    def from_profile(cls, profile: Optional[str] = None) -> "RunConfig":
        """Build a config from a profile, then apply BRATS_* variables.

        Raises:
            ConfigError: If the profile name is unknown.
        """
        name = profile or default_profile()
        try:
            profile_class = config[name]
        except KeyError as e:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(config)}") from e
        values = {key: getattr(profile_class, key.upper()) for key in cls.keys()}
        values.update(
            {
                key: os.environ[ENV_PREFIX + key.upper()]
                for key in cls.keys()
                if ENV_PREFIX + key.upper() in os.environ
            }
        )
        return cls._coerce(values)

    @classmethod
    def _coerce(cls, values: Mapping[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parsed: Dict[str, Any] = {}
        for f in fields(cls):
            if f.name not in values or values[f.name] is None:
                continue
            raw = values[f.name]
            try:
                parsed[f.name] = f.metadata["parse"](raw) if isinstance(raw, str) else raw
            except (TypeError, ValueError) as e:
                raise ConfigInvalid(f"invalid value {raw!r} for {f.name}: {e}") from e
        if base is None:
            missing = [key for key in cls.keys() if key not in parsed]
            if missing:
                raise ConfigError(f"missing config keys: {', '.join(missing)}")
            return cls(**parsed)
        return replace(base, **parsed)

    @classmethod
    def from_file(cls, path: "str | os.PathLike", base: Optional["RunConfig"] = None) -> "RunConfig":
        """Read a key=value run file over a base config (the default profile).

        Raises:
            ConfigError: If the file is missing or holds an unknown key.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls._coerce(dotenv_values(path), base or cls.from_profile())

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply overrides; string values are parsed like file values."""
        return self._coerce({k: v for k, v in overrides.items() if v is not None}, self)

    @classmethod
    def resolve(
        cls,
        profile: Optional[str] = None,
        config_file: Optional["str | os.PathLike"] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "RunConfig":
        """Profile, then environment, then run file, then overrides; validated."""
        resolved = cls.from_profile(profile)
        if config_file is not None:
            resolved = cls.from_file(config_file, resolved)
        resolved = resolved.with_overrides(overrides or {})
        resolved.validate()
        return resolved

    def to_file(self, path: "str | os.PathLike") -> Path:
        """Write the resolved snapshot; from_file reads it back identically."""
        path = Path(path)
        lines = ["# brats-unet2d run configuration"]
        lines += [f"{key}={_format(getattr(self, key))}" for key in sorted(self.keys())]
        lines += ["", "# assumed defaults (not published with the method):"]
        lines += [f"#   {key}" for key in ASSUMED_KEYS]
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as e:
            raise IoFailure(f"cannot write {path}: {e}", str(path)) from e
        return path

    # ------------------------------------------------------------------
    # Validation and component configs
    # ------------------------------------------------------------------

    def validate(self) -> None:
        """Check every component invariant.

        Raises:
            ConfigInvalid: On the first violated invariant.
        """
        if not self.input_modalities:
            raise ConfigInvalid("input_modalities must name at least one modality")
        if self.window_start < 0 or self.window_length < 1:
            raise ConfigInvalid("window_start must be >= 0 and window_length >= 1")
        ratios = self.split_ratios
        if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
            raise ConfigInvalid(f"split_ratios must be three positive values summing to 1, got {ratios}")
        if self.partition not in PARTITIONS:
            raise ConfigInvalid(f"partition must be one of {PARTITIONS}, got {self.partition!r}")
        if self.decision_mode not in DECISION_MODES:
            raise ConfigInvalid(f"decision_mode must be one of {DECISION_MODES}")
        self.unet_config()
        self.hyperparameters().validate()

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            in_channels=len(self.input_modalities),
            num_classes=NUM_CLASSES,
            base_features=self.base_features,
            depth=self.depth,
            input_size=self.input_size,
        )

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            early_stop_patience=self.early_stop_patience,
            early_stop_min_delta=self.early_stop_min_delta,
            monitor=self.monitor,
            seed=self.seed,
        )

    def window(self) -> SliceWindow:
        return SliceWindow(self.window_start, self.window_length)


ASSUMED_KEYS = tuple(ASSUMED_DEFAULTS) + ("window_start", "base_features")
