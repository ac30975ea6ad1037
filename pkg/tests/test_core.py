import numpy as np
import pytest

from slamdimm.core import (
    MODALITY_ORDER,
    ModalityId,
    MultiModalVolume,
    SliceSample,
    Volume,
    validate_case,
)

from conftest import make_case


def test_modality_order_is_fixed():
    assert MODALITY_ORDER == (
        ModalityId.T1CE,
        ModalityId.T1W,
        ModalityId.FLAIR,
        ModalityId.T2W,
    )
    assert len(ModalityId) == 4
    assert [m.channel for m in MODALITY_ORDER] == [0, 1, 2, 3]


def test_modality_from_string():
    assert ModalityId.from_string("T1ce") is ModalityId.T1CE
    assert ModalityId.from_string(" flair ") is ModalityId.FLAIR
    with pytest.raises(ValueError, match="unknown modality"):
        ModalityId.from_string("t3w")


def test_validate_case_clean():
    assert validate_case(make_case()) == []


def test_validate_case_shape_mismatch():
    case = make_case()
    bad = dict(case.volumes)
    short = case.volumes[ModalityId.T2W]
    bad[ModalityId.T2W] = Volume(data=short.data[:, :, :-1], modality=ModalityId.T2W)
    violations = validate_case(
        MultiModalVolume(volumes=bad, case_id="bad", seg_mask=None)
    )
    assert any(v.startswith("volumes.shape") for v in violations)


def test_validate_case_nonbinary_mask():
    case = make_case()
    mask = case.seg_mask.copy()
    mask.flat[0] = 2
    violations = validate_case(
        MultiModalVolume(volumes=case.volumes, case_id="bad", seg_mask=mask)
    )
    assert any(v.startswith("seg_mask.values") for v in violations)


def test_validate_case_missing_modality():
    case = make_case()
    partial = {m: v for m, v in case.volumes.items() if m is not ModalityId.T1W}
    violations = validate_case(MultiModalVolume(volumes=partial, case_id="bad"))
    assert any("modalities" in v for v in violations)


def test_validate_case_nonfinite():
    case = make_case()
    bad = dict(case.volumes)
    data = case.volumes[ModalityId.T1CE].data.copy()
    data[0, 0, 0] = np.nan
    bad[ModalityId.T1CE] = Volume(data=data, modality=ModalityId.T1CE)
    violations = validate_case(MultiModalVolume(volumes=bad, case_id="bad"))
    assert any("finite" in v for v in violations)


def test_validate_case_is_pure():
    case = make_case()
    assert validate_case(case) == validate_case(case)


def test_stacked_channel_order():
    case = make_case()
    stacked = case.stacked()
    for m in MODALITY_ORDER:
        assert np.array_equal(stacked[m.channel], case.volumes[m].data)


def test_slice_sample_shape_check():
    x = np.zeros((4, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError):
        SliceSample(
            x=x,
            target=np.zeros((4, 8, 7), dtype=np.float32),
            mask_slice=np.zeros((8, 8)),
            missing=ModalityId.T1W,
            slice_index=1,
        )
