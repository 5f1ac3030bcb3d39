"""
Error types for the segmentation pipeline.

Every failure the pipeline can report is a subclass of BratsUnetError.
Each branch carries the process exit code the command line uses:
- ConfigError: 1 (usage)
- DataError: 2 (bad or missing input data)
- PipelineRuntimeError: 3 (anything that fails while running)
"""

from typing import Optional, Tuple


class BratsUnetError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 3


# ============================================================================
# Usage / configuration
# ============================================================================


class ConfigError(BratsUnetError, ValueError):
    """Invalid or unknown configuration value."""

    exit_code = 1


class ConfigInvalid(ConfigError):
    """A model or training configuration violates its invariants."""


class UnknownMetric(ConfigError):
    """A metric name that is not one of the logged columns."""

    def __init__(self, name: str):
        super().__init__(f"unknown metric {name!r}")
        self.name = name


# ============================================================================
# Data errors
# ============================================================================


class DataError(BratsUnetError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 2


class MissingRoot(DataError, FileNotFoundError):
    """The dataset root directory does not exist."""

    def __init__(self, path):
        super().__init__(f"data root does not exist: {path}")
        self.path = path


class EmptyDataset(DataError, ValueError):
    """No case directories were found under a root."""


class ModalityMissing(DataError, KeyError):
    """A case has no file for the requested modality."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class SegmentationMissing(DataError, KeyError):
    """A case has no segmentation file."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class CorruptFile(DataError, ValueError):
    """A volume file is unreadable or has an unexpected shape."""


class InvalidLabel(DataError, ValueError):
    """A label value outside the BraTS label set."""

    def __init__(self, value: int, where: str = ""):
        message = f"invalid label {value}"
        if where:
            message += f" in {where}"
        super().__init__(message)
        self.value = value


class WindowOutOfBounds(DataError, IndexError):
    """A slice window or slice index does not fit the volume depth."""


class InvalidTarget(DataError, ValueError):
    """A resize target or one-hot target is malformed."""


class ClassOutOfRange(DataError, ValueError):
    """A class index is not below the number of classes."""


class BadRatios(DataError, ValueError):
    """Split ratios are not positive or do not sum to one."""


class TooFewCases(DataError, ValueError):
    """Not enough cases to fill every partition."""


class ShapeMismatch(DataError, ValueError):
    """Arrays or tensors with incompatible shapes."""


class InconsistentColumns(DataError, ValueError):
    """Reports or logs that do not share the metric column contract."""


class SampleError(DataError):
    """An error raised while building one sample, with its provenance."""

    def __init__(self, case_id: str, slice_index: int, cause: Exception):
        super().__init__(
            f"{type(cause).__name__} while building sample "
            f"({case_id}, slice {slice_index}): {cause}"
        )
        self.provenance: Tuple[str, int] = (case_id, slice_index)
        self.cause = cause


# ============================================================================
# Runtime errors
# ============================================================================


class PipelineRuntimeError(BratsUnetError):
    """A failure while training, evaluating or writing results."""

    exit_code = 3


class IoFailure(PipelineRuntimeError, OSError):
    """A file could not be written."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class DiskFull(IoFailure):
    """A callback could not write because the device is full."""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the command-line exit code.

    Args:
        error: The exception raised by a command.

    Returns:
        int: 1 for usage errors, 2 for data errors, 3 otherwise.
    """
    if isinstance(error, BratsUnetError):
        return error.exit_code
    return 3
