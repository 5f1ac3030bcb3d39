"""
Dataset splitting and batch generation.

Cases are split into train/validation/test partitions at case level, so
adjacent slices of one patient never land in two partitions. Batches are
built lazily from (case, slice) pairs, keeping at most one batch of
samples in memory per step.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import BadRatios, BratsUnetError, EmptyDataset, SampleError, TooFewCases
from preprocess import DEFAULT_MODALITIES, DEFAULT_SIZE, SliceSample, SliceWindow, build_sample
from volume_io import CaseRef, Modality

PUBLISHED_RATIOS = (0.68, 0.20, 0.12)
RATIO_TOLERANCE = 1e-9

SampleBuilder = Callable[..., SliceSample]


@dataclass
class DatasetSplit:
    """
    Case-level partition of a dataset.

    Attributes:
        train (List[CaseRef]): Training cases
        validation (List[CaseRef]): Validation cases
        test (List[CaseRef]): Held-out test cases
        seed (int): Shuffle seed used to build the split
    """

    train: List[CaseRef]
    validation: List[CaseRef]
    test: List[CaseRef]
    seed: int

    def partition(self, name: str) -> List[CaseRef]:
        """Return a partition by name; "all" returns every case."""
        if name == "all":
            return self.train + self.validation + self.test
        try:
            return {"train": self.train, "validation": self.validation, "test": self.test}[name]
        except KeyError as e:
            raise KeyError(f"unknown partition {name!r}") from e

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


@dataclass
class Batch:
    """
    A batch of samples in channels-last layout.

    Attributes:
        inputs (np.ndarray): (B, h, w, C_in) float32
        targets (Optional[np.ndarray]): (B, h, w, 4) float32 one-hot, None
            when only inputs are available (prediction)
        provenance (List[Tuple[str, int]]): (case_id, slice_index) per sample
    """

    inputs: np.ndarray
    targets: Optional[np.ndarray]
    provenance: List[Tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError("a batch holds at least one sample")
        if self.targets is not None and len(self.targets) != len(self.inputs):
            raise ValueError("batch inputs and targets must share a leading dim")

    def __len__(self) -> int:
        return len(self.inputs)


def _partition_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    # The tolerance absorbs products such as 0.57 * 100 = 56.99999999999999.
    n_train = math.floor(ratios[0] * n + RATIO_TOLERANCE)
    n_val = math.floor(ratios[1] * n + RATIO_TOLERANCE)
    return n_train, n_val, n - n_train - n_val


def minimum_cases(ratios: Sequence[float] = PUBLISHED_RATIOS) -> int:
    """Smallest case count for which every partition gets at least one case."""
    n = 3
    while 0 in _partition_sizes(n, ratios):
        n += 1
    return n


def split_cases(
    cases: Sequence[CaseRef],
    ratios: Sequence[float] = PUBLISHED_RATIOS,
    seed: int = 0,
) -> DatasetSplit:
    """Split cases into train/validation/test partitions.

    Cases are sorted by id, shuffled with the seed, then cut at
    floor(r_train * N) and floor(r_val * N); the remainder is the test set.

    Args:
        cases: At least three cases.
        ratios: Positive (train, validation, test) fractions summing to 1.
        seed (int): Shuffle seed.

    Returns:
        DatasetSplit: Disjoint partitions covering every case.

    Raises:
        BadRatios: If ratios are not three positive values summing to 1.
        TooFewCases: If fewer than three cases are given, or the floor
            sizes leave a partition empty.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > RATIO_TOLERANCE:
        raise BadRatios(f"ratios must be three positive values summing to 1, got {ratios}")
    if len(cases) < 3:
        raise TooFewCases(f"need at least 3 cases to split, got {len(cases)}")
    sizes = _partition_sizes(len(cases), ratios)
    if 0 in sizes:
        raise TooFewCases(
            f"{len(cases)} cases leave a partition empty with ratios {ratios}; "
            f"need at least {minimum_cases(ratios)} cases"
        )

    ordered = sorted(cases, key=lambda c: c.case_id)
    order = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in order]

    n_train, n_val, _ = sizes
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        seed=seed,
    )


def batches_per_epoch(n_cases: int, window_length: int, batch_size: int) -> int:
    """Number of batches one epoch yields, keeping the final partial batch."""
    return math.ceil(n_cases * window_length / batch_size)


class BatchGenerator:
    """
    Memory-bounded generator of batches over (case, slice) pairs.

    Each iteration is one epoch covering every in-window slice of every
    case exactly once. With shuffle enabled, epoch e uses seed + e, so an
    instance replays the same sequence of epochs on every run.
    """

    def __init__(
        self,
        cases: Sequence[CaseRef],
        window: SliceWindow,
        batch_size: int = 1,
        shuffle: bool = False,
        seed: int = 0,
        size: Tuple[int, int] = DEFAULT_SIZE,
        modalities: Sequence[Modality] = DEFAULT_MODALITIES,
        sample_builder: SampleBuilder = build_sample,
    ):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if not cases:
            raise EmptyDataset("batch generator needs at least one case")
        self.cases = list(cases)
        self.window = window
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.size = tuple(size)
        self.modalities = tuple(modalities)
        self.sample_builder = sample_builder
        self.epoch = 0

    def __len__(self) -> int:
        return batches_per_epoch(len(self.cases), self.window.length, self.batch_size)

    def set_epoch(self, epoch: int) -> None:
        """Select the shuffle order of an epoch."""
        self.epoch = epoch

    def pairs(self) -> List[Tuple[CaseRef, int]]:
        """The (case, slice_index) order of the current epoch.

        Shuffling permutes the case order and then the slices within each
        case, so the slices of one case stay contiguous and its volumes are
        read once per epoch.
        """
        indices = list(self.window.indices())
        if not self.shuffle:
            return [(case, index) for case in self.cases for index in indices]
        rng = np.random.default_rng(self.seed + self.epoch)
        pairs = []
        for case_index in rng.permutation(len(self.cases)):
            case = self.cases[case_index]
            pairs.extend((case, indices[i]) for i in rng.permutation(len(indices)))
        return pairs

    def _build(self, case: CaseRef, slice_index: int) -> SliceSample:
        try:
            return self.sample_builder(
                case, slice_index, self.window, size=self.size, modalities=self.modalities
            )
        except SampleError:
            raise
        except (BratsUnetError, ValueError, OSError) as e:
            raise SampleError(case.case_id, slice_index, e) from e

    def __iter__(self) -> Iterator[Batch]:
        pairs = self.pairs()
        for start in range(0, len(pairs), self.batch_size):
            samples = [self._build(case, index) for case, index in pairs[start : start + self.batch_size]]
            yield Batch(
                inputs=np.stack([s.input for s in samples]),
                targets=np.stack([s.target for s in samples]),
                provenance=[(s.case_id, s.slice_index) for s in samples],
            )


def batch_generator(
    cases: Sequence[CaseRef],
    window: SliceWindow,
    batch_size: int = 1,
    shuffle: bool = False,
    seed: int = 0,
    **kwargs,
) -> Iterator[Batch]:
    """Stream one epoch of batches; see BatchGenerator."""
    return iter(BatchGenerator(cases, window, batch_size, shuffle, seed, **kwargs))
