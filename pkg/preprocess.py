"""
Per-slice preprocessing.

Turns a case into 2D training samples: take the axial slices of a window,
resize them to the network input size, min-max normalize each input
channel, and one-hot encode the remapped labels.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from exceptions import ClassOutOfRange, InvalidTarget, WindowOutOfBounds
from volume_io import (
    CaseRef,
    LabelVolume,
    Modality,
    Volume,
    load_modality,
    load_segmentation,
    validate_labels,
)

NUM_CLASSES = 4
DEFAULT_SIZE = (128, 128)
DEFAULT_MODALITIES = (Modality.FLAIR, Modality.T1CE)

# BraTS label -> contiguous class index, and back.
LABEL_TO_CLASS = {0: 0, 1: 1, 2: 2, 4: 3}
CLASS_TO_LABEL = {c: label for label, c in LABEL_TO_CLASS.items()}

CONTINUOUS = "continuous"
LABEL = "label"


@dataclass(frozen=True)
class SliceWindow:
    """
    A contiguous run of axial slices.

    Attributes:
        start (int): First slice index
        length (int): Number of slices
    """

    start: int = 22
    length: int = 100

    def __post_init__(self):
        if self.start < 0:
            raise WindowOutOfBounds(f"window start must be >= 0, got {self.start}")
        if self.length < 1:
            raise WindowOutOfBounds(f"window length must be >= 1, got {self.length}")

    @property
    def stop(self) -> int:
        return self.start + self.length

    def indices(self) -> range:
        return range(self.start, self.stop)

    def check_depth(self, depth: int) -> None:
        """Raise WindowOutOfBounds unless the window fits a volume depth."""
        if self.stop > depth:
            raise WindowOutOfBounds(
                f"window [{self.start}, {self.stop}) exceeds volume depth {depth}"
            )

    def check_index(self, slice_index: int) -> None:
        if slice_index not in self.indices():
            raise WindowOutOfBounds(
                f"slice {slice_index} outside window [{self.start}, {self.stop})"
            )


@dataclass
class SliceSample:
    """
    One 2D training example.

    Attributes:
        input (np.ndarray): (h, w, C_in) float32 in [0, 1]
        target (np.ndarray): (h, w, 4) float32 one-hot
        case_id (str): Source case
        slice_index (int): Axial slice index in the source volume
    """

    input: np.ndarray
    target: np.ndarray
    case_id: str
    slice_index: int


# ============================================================================
# Slice-level operations
# ============================================================================


def extract_slices(
    volume: Union[Volume, LabelVolume, np.ndarray], window: SliceWindow
) -> List[np.ndarray]:
    """Return the axial slices of a window, at native in-plane size.

    Raises:
        WindowOutOfBounds: If the window does not fit the volume depth.
    """
    data = volume if isinstance(volume, np.ndarray) else volume.data
    window.check_depth(data.shape[2])
    return [data[:, :, index] for index in window.indices()]


def resize_slice(
    slice_: np.ndarray, target: Tuple[int, int], mode: str = CONTINUOUS
) -> np.ndarray:
    """Resize a 2D slice.

    Continuous mode samples bilinearly at pixel centres (half-pixel
    alignment). Label mode uses nearest-neighbour sampling, so every output
    value is present in the input.

    Args:
        slice_ (np.ndarray): A non-empty 2D array.
        target (Tuple[int, int]): Output (h, w), both >= 1.
        mode (str): "continuous" or "label".

    Returns:
        np.ndarray: float64 in continuous mode, the input dtype in label mode.

    Raises:
        InvalidTarget: On an empty slice, a bad target or an unknown mode.
    """
    slice_ = np.asarray(slice_)
    if slice_.ndim != 2 or slice_.size == 0:
        raise InvalidTarget(f"expected a non-empty 2D slice, got shape {slice_.shape}")
    if len(target) != 2 or min(target) < 1:
        raise InvalidTarget(f"resize target must be two dims >= 1, got {target}")
    size = (int(target[0]), int(target[1]))

    tensor = torch.from_numpy(slice_.astype(np.float64))[None, None]
    if mode == CONTINUOUS:
        resized = F.interpolate(tensor, size=size, mode="bilinear", align_corners=False)
        return resized[0, 0].numpy()
    if mode == LABEL:
        resized = F.interpolate(tensor, size=size, mode="nearest-exact")
        return resized[0, 0].numpy().astype(slice_.dtype)
    raise InvalidTarget(f"unknown resize mode {mode!r}")


def normalize_minmax(slice_: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1] by (x - min) / (max - min); constant input gives zeros."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    if slice_.size == 0:
        return slice_
    low, high = slice_.min(), slice_.max()
    if high == low:
        return np.zeros_like(slice_)
    return np.clip((slice_ - low) / (high - low), 0.0, 1.0)


def remap_labels(labels: np.ndarray) -> np.ndarray:
    """Map BraTS labels {0, 1, 2, 4} to classes {0, 1, 2, 3}.

    Raises:
        InvalidLabel: If a value outside {0, 1, 2, 4} is present.
    """
    labels = np.asarray(labels)
    validate_labels(labels)
    classes = labels.astype(np.uint8)
    classes[labels == 4] = 3
    return classes


def inverse_remap_labels(classes: np.ndarray) -> np.ndarray:
    """Map classes {0, 1, 2, 3} back to BraTS labels {0, 1, 2, 4}.

    Raises:
        ClassOutOfRange: If a value outside {0, 1, 2, 3} is present.
    """
    classes = np.asarray(classes)
    for value in np.unique(classes):
        if value not in CLASS_TO_LABEL:
            raise ClassOutOfRange(f"class {value} not in 0..{NUM_CLASSES - 1}")
    labels = classes.astype(np.uint8)
    labels[classes == 3] = 4
    return labels


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """One-hot encode a class map into a trailing channel axis.

    Returns:
        np.ndarray: (..., num_classes) float32 with exactly one 1 per pixel.

    Raises:
        ClassOutOfRange: If a value is negative or >= num_classes.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ClassOutOfRange(
            f"class values must lie in 0..{num_classes - 1}, "
            f"got {labels.min()}..{labels.max()}"
        )
    return np.eye(num_classes, dtype=np.float32)[labels.astype(np.int64)]


def composite_regions(labels: np.ndarray) -> Dict[str, np.ndarray]:
    """Whole, core and enhancing tumor masks from BraTS labels."""
    labels = np.asarray(labels)
    return {
        "whole": np.isin(labels, (1, 2, 4)),
        "core": np.isin(labels, (1, 4)),
        "enhancing": labels == 4,
    }


# ============================================================================
# Sample assembly
# ============================================================================


def build_inputs(
    case: CaseRef,
    slice_index: int,
    window: SliceWindow,
    size: Tuple[int, int] = DEFAULT_SIZE,
    modalities: Sequence[Modality] = DEFAULT_MODALITIES,
) -> np.ndarray:
    """Stack the resized, normalized modality slices of one index.

    Returns:
        np.ndarray: (h, w, len(modalities)) float32 in [0, 1].
    """
    window.check_index(slice_index)
    channels = []
    for modality in modalities:
        volume = load_modality(case, modality)
        window.check_depth(volume.shape[2])
        resized = resize_slice(volume.data[:, :, slice_index], size, CONTINUOUS)
        channels.append(normalize_minmax(resized))
    return np.stack(channels, axis=-1).astype(np.float32)


def build_target(
    case: CaseRef,
    slice_index: int,
    window: SliceWindow,
    size: Tuple[int, int] = DEFAULT_SIZE,
) -> np.ndarray:
    """One-hot target of one slice: (h, w, 4) float32."""
    window.check_index(slice_index)
    labels = load_segmentation(case)
    window.check_depth(labels.shape[2])
    resized = resize_slice(labels.data[:, :, slice_index], size, LABEL)
    return one_hot(remap_labels(resized))


def build_sample(
    case: CaseRef,
    slice_index: int,
    window: SliceWindow,
    size: Tuple[int, int] = DEFAULT_SIZE,
    modalities: Sequence[Modality] = DEFAULT_MODALITIES,
) -> SliceSample:
    """Assemble the input channels and one-hot target of one slice."""
    return SliceSample(
        input=build_inputs(case, slice_index, window, size, modalities),
        target=build_target(case, slice_index, window, size),
        case_id=case.case_id,
        slice_index=slice_index,
    )
