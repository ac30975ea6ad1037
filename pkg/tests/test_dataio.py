import numpy as np
import pytest

from slamdimm.core import MODALITY_ORDER, ModalityId
from slamdimm.dataio import (
    cases_for_split,
    load_case,
    read_manifest,
    read_nifti,
    save_case,
    write_manifest,
    write_nifti,
)

from conftest import make_case


def test_nifti_round_trip(tmp_path):
    data = np.random.default_rng(0).random((9, 7, 5)).astype(np.float32)
    affine = np.array(
        [[0, -1.5, 0, 10], [2.0, 0, 0, -4], [0, 0, 3.0, 7], [0, 0, 0, 1]], dtype=np.float64
    )
    path = tmp_path / "vol.nii.gz"
    write_nifti(path, data, spacing=(1.5, 2.0, 3.0), affine=affine)
    back, spacing, affine_back = read_nifti(path)
    assert np.array_equal(back, data)
    assert spacing == (1.5, 2.0, 3.0)
    assert np.allclose(affine_back, affine)


def test_nifti_uncompressed_and_uint8(tmp_path):
    mask = (np.random.default_rng(1).random((4, 4, 4)) > 0.5).astype(np.uint8)
    path = tmp_path / "mask.nii"
    write_nifti(path, mask, dtype=np.uint8)
    back, _, _ = read_nifti(path)
    assert np.array_equal(back, mask)


def test_nifti_rejects_garbage(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(ValueError):
        read_nifti(path)


def test_case_round_trip_preserves_channel_order(tmp_path):
    case = make_case(shape=(6, 5, 4), case_id="rt")
    entry = save_case(case, tmp_path)
    write_manifest(tmp_path, [entry])
    back = load_case(read_manifest(tmp_path)["cases"][0], tmp_path)
    assert back.case_id == "rt"
    assert list(back.volumes.keys()) == list(case.volumes.keys())
    for m in MODALITY_ORDER:
        assert np.array_equal(back.volumes[m].data, case.volumes[m].data)
    assert np.array_equal(back.seg_mask, case.seg_mask)


def test_manifest_split_filtering(tmp_path):
    entries = [
        {"case_id": "a", "volumes": {}, "split": "train"},
        {"case_id": "b", "volumes": {}, "split": "val"},
        {"case_id": "c", "volumes": {}},  # defaults to train
    ]
    write_manifest(tmp_path, entries, preprocessing={"trim_slices": 2})
    manifest = read_manifest(tmp_path)
    assert [e["case_id"] for e in cases_for_split(manifest, "train")] == ["a", "c"]
    assert [e["case_id"] for e in cases_for_split(manifest, "val")] == ["b"]
    assert len(cases_for_split(manifest, None)) == 3
    assert manifest["preprocessing"]["trim_slices"] == 2


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "nowhere")
