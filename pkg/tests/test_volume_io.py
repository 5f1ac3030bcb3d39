"""Tests for case discovery, volume loading and synthetic fixtures."""

import numpy as np
import pytest

from exceptions import (
    ConfigInvalid,
    CorruptFile,
    EmptyDataset,
    InvalidLabel,
    MissingRoot,
    ModalityMissing,
    SegmentationMissing,
)
from volume_io import (
    LABEL_VALUES,
    Modality,
    case_from_dir,
    discover_cases,
    generate_synthetic_case,
    generate_synthetic_dataset,
    label_counts,
    load_modality,
    load_segmentation,
    save_volume,
)


def test_discover_two_cases(tmp_path):
    generate_synthetic_dataset(0, tmp_path, n_cases=2, shape=(16, 16, 10))
    cases = discover_cases(tmp_path)

    assert [c.case_id for c in cases] == ["BraTS_Synth_000", "BraTS_Synth_001"]
    for case in cases:
        assert case.has_segmentation
        assert case.available_modalities == {Modality.FLAIR, Modality.T1CE}


def test_discover_sorts_by_case_id(tmp_path):
    for case_id in ("caseB", "caseA", "caseC"):
        generate_synthetic_case(0, tmp_path, shape=(8, 8, 8), case_id=case_id)
    assert [c.case_id for c in discover_cases(tmp_path)] == ["caseA", "caseB", "caseC"]


def test_missing_root_names_the_path(tmp_path):
    missing = tmp_path / "nowhere"
    with pytest.raises(MissingRoot) as excinfo:
        discover_cases(missing)
    assert str(missing) in str(excinfo.value)


def test_root_without_modality_files_is_empty(tmp_path):
    (tmp_path / "notes").mkdir()
    (tmp_path / "notes" / "readme.txt").write_text("no volumes here")
    with pytest.raises(EmptyDataset):
        discover_cases(tmp_path)


def test_case_without_segmentation(tmp_path):
    case_dir = tmp_path / "caseX"
    save_volume(np.ones((8, 8, 8), dtype=np.uint16), case_dir / "caseX_flair.nii")
    case = case_from_dir(case_dir)

    assert case.available_modalities == {Modality.FLAIR}
    assert not case.has_segmentation
    with pytest.raises(SegmentationMissing):
        load_segmentation(case)


def test_load_modality_keeps_stored_values(synthetic_case):
    volume = load_modality(synthetic_case, Modality.FLAIR)

    assert volume.shape == (32, 32, 16)
    assert volume.modality is Modality.FLAIR
    assert volume.data.dtype == np.uint16
    assert volume.data.min() >= 0
    assert not volume.data.flags.writeable


def test_load_modality_accepts_suffix_strings(synthetic_case):
    assert load_modality(synthetic_case, "T1CE").modality is Modality.T1CE


def test_missing_modality(synthetic_case):
    with pytest.raises(ModalityMissing):
        load_modality(synthetic_case, Modality.T2)


def test_segmentation_holds_every_label(synthetic_case):
    labels = load_segmentation(synthetic_case)
    assert labels.data.dtype == np.uint8
    assert set(np.unique(labels.data)) == set(LABEL_VALUES)


def test_invalid_label_reports_the_value(tmp_path):
    case_dir = tmp_path / "caseBad"
    save_volume(np.ones((8, 8, 8), dtype=np.uint16), case_dir / "caseBad_flair.nii")
    seg = np.zeros((8, 8, 8), dtype=np.uint8)
    seg[2, 2, 2] = 3
    save_volume(seg, case_dir / "caseBad_seg.nii")

    with pytest.raises(InvalidLabel) as excinfo:
        load_segmentation(case_from_dir(case_dir))
    assert excinfo.value.value == 3


def test_corrupt_file(tmp_path):
    case_dir = tmp_path / "caseC"
    case_dir.mkdir()
    (case_dir / "caseC_flair.nii").write_bytes(b"not a nifti file")
    with pytest.raises(CorruptFile):
        load_modality(case_from_dir(case_dir), Modality.FLAIR)


def test_shape_disagreement_is_corrupt(tmp_path):
    case_dir = tmp_path / "caseS"
    save_volume(np.ones((8, 8, 8), dtype=np.uint16), case_dir / "caseS_flair.nii")
    save_volume(np.ones((8, 8, 9), dtype=np.uint16), case_dir / "caseS_t1ce.nii")
    with pytest.raises(CorruptFile):
        load_modality(case_from_dir(case_dir), Modality.T1CE)


def test_synthetic_case_is_byte_deterministic(tmp_path):
    a = generate_synthetic_case(7, tmp_path / "a", shape=(16, 16, 12))
    b = generate_synthetic_case(7, tmp_path / "b", shape=(16, 16, 12))
    for suffix in ("flair", "t1ce", "seg"):
        assert a.path_for(suffix).read_bytes() == b.path_for(suffix).read_bytes()


def test_synthetic_case_smallest_shape_has_every_label(tmp_path):
    case = generate_synthetic_case(3, tmp_path, shape=(8, 8, 8))
    assert set(np.unique(load_segmentation(case).data)) == set(LABEL_VALUES)


def test_synthetic_case_rejects_tiny_shapes(tmp_path):
    with pytest.raises(ConfigInvalid):
        generate_synthetic_case(0, tmp_path, shape=(4, 16, 16))


def test_synthetic_case_all_modalities_compressed(tmp_path):
    case = generate_synthetic_case(0, tmp_path, shape=(8, 8, 8), modalities=list(Modality), compress=True)
    assert case.available_modalities == set(Modality)
    assert case.path_for("t2").name.endswith(".nii.gz")


def test_label_counts_cover_every_voxel(synthetic_case):
    labels = load_segmentation(synthetic_case).data
    counts = label_counts(labels)
    assert sorted(counts) == list(LABEL_VALUES)
    assert sum(counts.values()) == labels.size
