"""
Volume I/O for BraTS-layout datasets.

A dataset root holds one directory per case, and each case directory holds
one NIfTI-1 file per modality plus an optional segmentation:

    <root>/<case_id>/<case_id>_<suffix>.nii[.gz]

with suffixes flair, t1, t1ce, t2 and seg. This module discovers cases,
loads modality and label volumes, writes volumes, and generates synthetic
cases that follow the same layout for tests and demos.
"""

import errno
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from exceptions import (
    ConfigInvalid,
    CorruptFile,
    DiskFull,
    EmptyDataset,
    InvalidLabel,
    IoFailure,
    MissingRoot,
    ModalityMissing,
    SegmentationMissing,
)
from extensions import log_event, logger

NIFTI_EXTENSIONS = (".nii.gz", ".nii")
SEGMENTATION_SUFFIX = "seg"
PREDICTION_SUFFIX = "pred"
LABEL_VALUES = (0, 1, 2, 4)
BRATS_DEPTH = 155
DEFAULT_SHAPE = (240, 240, BRATS_DEPTH)
MIN_SYNTHETIC_DIM = 8


class Modality(str, Enum):
    """MRI modality tags, valued by their BraTS file suffix."""

    FLAIR = "flair"
    T1 = "t1"
    T1CE = "t1ce"
    T2 = "t2"

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        """Parse a modality from its suffix or name, case-insensitively."""
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError as e:
            raise ModalityMissing(f"unknown modality {value!r}") from e


# ============================================================================
# Domain types
# ============================================================================


@dataclass(frozen=True)
class CaseRef:
    """
    A case directory on disk.

    Attributes:
        case_id (str): Directory name, also the file name prefix
        root_path (Path): The case directory
        available_modalities (FrozenSet[Modality]): Modalities with a file
        has_segmentation (bool): Whether a segmentation file exists
    """

    case_id: str
    root_path: Path
    available_modalities: FrozenSet[Modality]
    has_segmentation: bool

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id must be non-empty")

    def path_for(self, suffix: str) -> Optional[Path]:
        """Return the existing file for a suffix, preferring .nii.gz."""
        for extension in NIFTI_EXTENSIONS:
            candidate = self.root_path / f"{self.case_id}_{suffix}{extension}"
            if candidate.is_file():
                return candidate
        return None


@dataclass
class Volume:
    """
    One modality's 3D intensity grid.

    Attributes:
        data (np.ndarray): (H, W, D) non-negative intensities
        modality (Modality): The modality tag
        affine (np.ndarray): 4x4 voxel-to-world transform
    """

    data: np.ndarray
    modality: Modality
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    """
    A 3D segmentation grid with values in {0, 1, 2, 4}.

    Attributes:
        data (np.ndarray): (H, W, D) integer labels
        affine (np.ndarray): 4x4 voxel-to-world transform
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


# ============================================================================
# Discovery
# ============================================================================


def case_from_dir(case_dir: "str | os.PathLike") -> Optional[CaseRef]:
    """Build a CaseRef for one directory.

    Args:
        case_dir: A directory following the BraTS naming convention.

    Returns:
        Optional[CaseRef]: The case, or None when it holds no recognized
        modality file.
    """
    case_dir = Path(case_dir)
    case_id = case_dir.name
    candidate = CaseRef(case_id, case_dir, frozenset(), False)
    modalities = frozenset(m for m in Modality if candidate.path_for(m.value))
    if not modalities:
        return None
    has_segmentation = candidate.path_for(SEGMENTATION_SUFFIX) is not None
    return CaseRef(case_id, case_dir, modalities, has_segmentation)


def discover_cases(root: "str | os.PathLike") -> List[CaseRef]:
    """Discover every case directory under a dataset root.

    Args:
        root: The dataset root.

    Returns:
        List[CaseRef]: One entry per subdirectory holding at least one
        modality file, sorted by case_id.

    Raises:
        MissingRoot: If root does not exist.
        EmptyDataset: If no case is found.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingRoot(root)

    cases = []
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if not entry.is_dir():
            continue
        case = case_from_dir(entry)
        if case is not None:
            cases.append(case)

    if not cases:
        raise EmptyDataset(f"no cases found under {root}")
    logger.debug("discovered %d cases under %s", len(cases), root)
    return cases


# ============================================================================
# Loading
# ============================================================================


@lru_cache(maxsize=8)
def _read_nifti(path: str, mtime_ns: int) -> Tuple[np.ndarray, np.ndarray]:
    """Read a NIfTI file; cached per (path, mtime) and returned read-only."""
    try:
        image = nib.load(path)
        data = np.asanyarray(image.dataobj)
    except (ImageFileError, OSError, EOFError, ValueError) as e:
        raise CorruptFile(f"cannot read {path}: {e}") from e
    if data.ndim != 3:
        raise CorruptFile(f"{path} has {data.ndim} dimensions, expected 3")
    data = np.array(data)
    data.setflags(write=False)
    return data, np.asarray(image.affine)


def _read(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    return _read_nifti(str(path), path.stat().st_mtime_ns)


def _header_shape(path: Path) -> Tuple[int, ...]:
    try:
        return tuple(int(n) for n in nib.load(str(path)).shape)
    except (ImageFileError, OSError, EOFError, ValueError) as e:
        raise CorruptFile(f"cannot read {path}: {e}") from e


def _reference_shape(case: CaseRef) -> Tuple[int, ...]:
    """Shape every file of a case must share: the first modality's."""
    first = sorted(case.available_modalities, key=lambda m: list(Modality).index(m))[0]
    return _header_shape(case.path_for(first.value))


def load_modality(case: CaseRef, modality: "str | Modality") -> Volume:
    """Load one modality volume of a case.

    Args:
        case (CaseRef): The case.
        modality: The modality tag or suffix.

    Returns:
        Volume: The grid exactly as stored; the array is read-only.

    Raises:
        ModalityMissing: If the case has no file for the modality.
        CorruptFile: If the file is unreadable, not 3D, negative, or its
            shape differs from the case's other volumes.
    """
    modality = Modality.parse(modality)
    path = case.path_for(modality.value) if modality in case.available_modalities else None
    if path is None:
        raise ModalityMissing(f"case {case.case_id} has no {modality.value} volume")

    data, affine = _read(path)
    if data.shape != _reference_shape(case):
        raise CorruptFile(
            f"{path.name} has shape {data.shape}, expected {_reference_shape(case)}"
        )
    if data.size and data.min() < 0:
        raise CorruptFile(f"{path.name} contains negative intensities")
    return Volume(data=data, modality=modality, affine=affine)


def validate_labels(data: np.ndarray, where: str = "") -> None:
    """Raise InvalidLabel naming the first value outside {0, 1, 2, 4}."""
    values = np.unique(data)
    for value in values:
        if value not in LABEL_VALUES:
            raise InvalidLabel(int(value) if float(value).is_integer() else value, where)


def load_segmentation(case: CaseRef) -> LabelVolume:
    """Load and validate the segmentation volume of a case.

    Args:
        case (CaseRef): The case.

    Returns:
        LabelVolume: Labels as uint8, values within {0, 1, 2, 4}.

    Raises:
        SegmentationMissing: If the case has no segmentation file.
        InvalidLabel: If any voxel holds another value.
    """
    path = case.path_for(SEGMENTATION_SUFFIX) if case.has_segmentation else None
    if path is None:
        raise SegmentationMissing(f"case {case.case_id} has no segmentation")

    data, affine = _read(path)
    validate_labels(data, path.name)
    labels = data.astype(np.uint8)
    labels.setflags(write=False)
    return LabelVolume(data=labels, affine=affine)


def label_counts(labels: np.ndarray) -> Dict[int, int]:
    """Count voxels per BraTS label.

    Args:
        labels (np.ndarray): A label array with values in {0, 1, 2, 4}.

    Returns:
        Dict[int, int]: Voxel count for each of 0, 1, 2 and 4.
    """
    return {value: int(np.count_nonzero(labels == value)) for value in LABEL_VALUES}


# ============================================================================
# Writing
# ============================================================================


def save_volume(
    array: np.ndarray,
    path: "str | os.PathLike",
    affine: Optional[np.ndarray] = None,
) -> Path:
    """Write a 3D array as a NIfTI-1 file.

    Args:
        array (np.ndarray): The grid; its dtype is kept on disk.
        path: Target file ending in .nii or .nii.gz.
        affine (Optional[np.ndarray]): Voxel-to-world transform.

    Returns:
        Path: The written file.

    Raises:
        DiskFull: If the device has no space left.
        IoFailure: On any other write error.
    """
    path = Path(path)
    image = nib.Nifti1Image(np.asarray(array), np.eye(4) if affine is None else affine)
    image.header.set_xyzt_units("mm")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nib.save(image, str(path))
    except OSError as e:
        if e.errno == errno.ENOSPC:
            raise DiskFull(f"no space left writing {path}", str(path)) from e
        raise IoFailure(f"cannot write {path}: {e}", str(path)) from e
    return path


# ============================================================================
# Synthetic cases
# ============================================================================

# Mean intensity per label (background brain, necrotic, edema, -, enhancing).
_INTENSITY_TEMPLATES = {
    Modality.FLAIR: {0: 300.0, 1: 520.0, 2: 950.0, 4: 700.0},
    Modality.T1CE: {0: 420.0, 1: 180.0, 2: 520.0, 4: 1300.0},
    Modality.T1: {0: 500.0, 1: 250.0, 2: 430.0, 4: 600.0},
    Modality.T2: {0: 350.0, 1: 900.0, 2: 1100.0, 4: 800.0},
}
_NOISE_SIGMA = 25.0


def _tumor_labels(rng: np.random.Generator, shape: Tuple[int, int, int]) -> np.ndarray:
    """Nested ellipsoids: necrotic core, enhancing shell, edema around both.

    Radii are at least one voxel per shell and the centre is a voxel
    centre, so every label is present for any dimension >= 8.
    """
    dims = np.asarray(shape, dtype=float)
    r_core = np.maximum(1.0, 0.10 * dims)
    r_enhancing = r_core + np.maximum(1.0, 0.07 * dims)
    r_edema = r_enhancing + np.maximum(1.5, 0.12 * dims)

    jitter = np.array([int(0.08 * n) for n in shape])
    center = np.array(shape) // 2 + np.array(
        [rng.integers(-j, j + 1) if j else 0 for j in jitter]
    )

    grid = np.ogrid[tuple(slice(0, n) for n in shape)]

    def inside(radii: np.ndarray) -> np.ndarray:
        return sum(((axis - c) / r) ** 2 for axis, c, r in zip(grid, center, radii)) <= 1.0

    labels = np.zeros(shape, dtype=np.uint8)
    labels[inside(r_edema)] = 2
    labels[inside(r_enhancing)] = 4
    labels[inside(r_core)] = 1
    return labels


def _brain_mask(shape: Tuple[int, int, int]) -> np.ndarray:
    grid = np.ogrid[tuple(slice(0, n) for n in shape)]
    center = (np.asarray(shape) - 1) / 2.0
    radii = 0.45 * np.asarray(shape, dtype=float)
    return sum(((axis - c) / r) ** 2 for axis, c, r in zip(grid, center, radii)) <= 1.0


def _synthetic_intensities(
    rng: np.random.Generator,
    labels: np.ndarray,
    brain: np.ndarray,
    modality: Modality,
) -> np.ndarray:
    template = _INTENSITY_TEMPLATES[modality]
    grid = np.zeros(labels.shape, dtype=np.float64)
    for value, mean in template.items():
        grid[labels == value] = mean
    noise = rng.normal(0.0, _NOISE_SIGMA, size=labels.shape)
    grid = np.where(brain | (labels > 0), grid + noise, 0.0)
    return np.clip(np.rint(grid), 0, np.iinfo(np.uint16).max).astype(np.uint16)


def generate_synthetic_case(
    seed: int,
    out_dir: "str | os.PathLike",
    shape: Sequence[int] = DEFAULT_SHAPE,
    modalities: Iterable["str | Modality"] = (Modality.FLAIR, Modality.T1CE),
    case_id: Optional[str] = None,
    compress: bool = False,
) -> CaseRef:
    """Write a synthetic BraTS-layout case.

    The segmentation holds a necrotic core (1) inside an enhancing shell
    (4) inside edema (2) over background (0); modality intensities follow
    the labels with seeded Gaussian noise. Output is deterministic for a
    given seed.

    Args:
        seed (int): Random seed.
        out_dir: Dataset root; the case is written to out_dir/<case_id>.
        shape: (H, W, D) with every dimension >= 8.
        modalities: Modalities to write besides the segmentation.
        case_id (Optional[str]): Defaults to BraTS_Synth_<seed>.
        compress (bool): Write .nii.gz instead of .nii.

    Returns:
        CaseRef: The written case.

    Raises:
        ConfigInvalid: If the shape is not 3D or a dimension is below 8.
        IoFailure: If a file cannot be written.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < MIN_SYNTHETIC_DIM:
        raise ConfigInvalid(
            f"synthetic shape must be 3D with dims >= {MIN_SYNTHETIC_DIM}, got {shape}"
        )

    case_id = case_id or f"BraTS_Synth_{seed:03d}"
    case_dir = Path(out_dir) / case_id
    extension = ".nii.gz" if compress else ".nii"

    rng = np.random.default_rng(seed)
    labels = _tumor_labels(rng, shape)
    brain = _brain_mask(shape)
    for modality in sorted({Modality.parse(m) for m in modalities}, key=list(Modality).index):
        grid = _synthetic_intensities(rng, labels, brain, modality)
        save_volume(grid, case_dir / f"{case_id}_{modality.value}{extension}")
    save_volume(labels, case_dir / f"{case_id}_{SEGMENTATION_SUFFIX}{extension}")

    log_event("fixture_generated", f"seed={seed} shape={shape}", case_id)
    return case_from_dir(case_dir)


def generate_synthetic_dataset(
    seed: int,
    out_dir: "str | os.PathLike",
    n_cases: int,
    shape: Sequence[int] = DEFAULT_SHAPE,
    **kwargs,
) -> List[CaseRef]:
    """Write n_cases synthetic cases with consecutive seeds."""
    if n_cases < 1:
        raise ConfigInvalid("n_cases must be at least 1")
    return [
        generate_synthetic_case(seed + offset, out_dir, shape, **kwargs)
        for offset in range(n_cases)
    ]
