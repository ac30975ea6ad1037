"""Canonical domain types shared by every stage of the pipeline.

All volumes live in (H, W, D) index order with axial slices indexed along
the last axis. Multi-channel slices are channel-first (4, H, W) with the
channel order fixed by ``MODALITY_ORDER``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "ModalityId",
    "MODALITY_ORDER",
    "Volume",
    "MultiModalVolume",
    "SliceSample",
    "validate_case",
]


class ModalityId(Enum):
    """The four MRI contrasts handled by the pipeline.

    Definition order is the canonical channel order. It is frozen here
    (not configurable) so that multi-channel tensors, checkpoints and
    manifests all agree on which channel is which.
    """

    T1CE = "t1ce"
    T1W = "t1w"
    FLAIR = "flair"
    T2W = "t2w"

    @property
    def channel(self) -> int:
        return MODALITY_ORDER.index(self)

    @classmethod
    def from_string(cls, name: str) -> "ModalityId":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown modality {name!r}; expected one of: {valid}") from None


MODALITY_ORDER: tuple[ModalityId, ...] = (
    ModalityId.T1CE,
    ModalityId.T1W,
    ModalityId.FLAIR,
    ModalityId.T2W,
)


def _identity_affine() -> np.ndarray:
    return np.eye(4, dtype=np.float64)


@dataclass(frozen=True)
class Volume:
    """A single-modality 3D intensity grid plus its geometry metadata.

    ``data`` is (H, W, D) float. Spacing (mm per axis) and the affine are
    carried through preprocessing unchanged; nothing downstream interprets
    them beyond writing them back out.
    """

    data: np.ndarray
    modality: ModalityId
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=_identity_affine)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same modality and geometry, new voxel grid."""
        return Volume(data=data, modality=self.modality, spacing=self.spacing, affine=self.affine)


@dataclass(frozen=True)
class MultiModalVolume:
    """A co-registered case: all four modalities plus an optional lesion mask."""

    volumes: dict[ModalityId, Volume]
    case_id: str
    seg_mask: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).shape

    def volume(self, m: ModalityId) -> Volume:
        return self.volumes[m]

    def stacked(self) -> np.ndarray:
        """All four modalities as one (4, H, W, D) array in canonical order."""
        return np.stack([self.volumes[m].data for m in MODALITY_ORDER], axis=0)


@dataclass(frozen=True)
class SliceSample:
    """One axial training sample: a 4-channel slice with one channel zeroed.

    ``x`` is the masked network input (4, H, W); ``target`` keeps the
    pre-masking values of all four channels so the reconstruction loss can
    cover every modality. ``slice_index`` is 1-based to match the depth
    index convention used everywhere else.
    """

    x: np.ndarray
    target: np.ndarray
    mask_slice: np.ndarray
    missing: ModalityId
    slice_index: int
    case_id: str = ""

    def __post_init__(self):
        if self.x.shape != self.target.shape or self.x.shape[0] != len(MODALITY_ORDER):
            raise ValueError(
                f"slice sample shapes disagree: x {self.x.shape}, target {self.target.shape}"
            )


def validate_case(case: MultiModalVolume) -> list[str]:
    """Check a case against the ingestion invariants.

    Returns a list of human-readable violations (field + rule); empty means
    the case is well formed. Never raises: callers decide what is fatal.
    """
    violations: list[str] = []

    present = set(case.volumes.keys())
    expected = set(MODALITY_ORDER)
    if present != expected:
        missing = sorted(m.value for m in expected - present)
        extra = sorted(str(m) for m in present - expected)
        detail = []
        if missing:
            detail.append(f"missing {missing}")
        if extra:
            detail.append(f"unexpected {extra}")
        violations.append(f"volumes.modalities: {'; '.join(detail)}")
        return violations  # shape checks below assume all four are present

    shapes = {m: case.volumes[m].data.shape for m in MODALITY_ORDER}
    ref_shape = shapes[MODALITY_ORDER[0]]
    if any(s != ref_shape for s in shapes.values()):
        violations.append(f"volumes.shape: modalities disagree {shapes}")
    if any(n < 1 for n in ref_shape):
        violations.append(f"volumes.shape: degenerate axis in {ref_shape}")

    for m in MODALITY_ORDER:
        if not np.all(np.isfinite(case.volumes[m].data)):
            violations.append(f"volumes[{m.value}].finite: contains NaN or inf")

    if case.seg_mask is not None:
        if case.seg_mask.shape != ref_shape:
            violations.append(
                f"seg_mask.shape: {case.seg_mask.shape} != volume shape {ref_shape}"
            )
        values = np.unique(case.seg_mask)
        if not np.all(np.isin(values, (0, 1))):
            violations.append(f"seg_mask.values: non-binary values {values[:8].tolist()}")

    return violations
