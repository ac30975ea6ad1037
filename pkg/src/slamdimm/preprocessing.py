"""Intensity and slice preprocessing, slice extraction, and modality masking.

Pipeline order is fixed: percentile clip -> axial trim -> normalize to
[0, 1] -> slice extraction. Clipping and normalization are per volume (one
modality of one case); the segmentation mask is trimmed alongside but never
intensity-normalized.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import MODALITY_ORDER, ModalityId, MultiModalVolume, SliceSample, Volume, validate_case

__all__ = [
    "PreprocessConfig",
    "SliceTemplate",
    "percentile_clip",
    "trim_axial_slices",
    "normalize_intensity",
    "preprocess_case",
    "extract_axial_slices",
    "simulate_missing_modality",
]


@dataclass(frozen=True)
class PreprocessConfig:
    clip_low_pct: float = 0.5
    clip_high_pct: float = 99.5
    trim_slices: int = 15
    normalize_to: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not (0.0 <= self.clip_low_pct < self.clip_high_pct <= 100.0):
            raise ValueError(
                f"clip percentiles must satisfy 0 <= low < high <= 100, "
                f"got ({self.clip_low_pct}, {self.clip_high_pct})"
            )
        if self.trim_slices < 0:
            raise ValueError("trim_slices must be >= 0")
        if self.normalize_to != (0.0, 1.0):
            raise ValueError("only [0, 1] output range is supported")


def percentile_clip(v: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    """Clip voxel intensities to the volume's [low, high] percentiles.

    Percentiles use linear interpolation between order statistics over all
    voxels. A constant volume comes back unchanged (both bounds coincide).
    """
    cfg = cfg or PreprocessConfig()
    lo, hi = np.percentile(v.data, [cfg.clip_low_pct, cfg.clip_high_pct])
    return v.with_data(np.clip(v.data, lo, hi))


def trim_axial_slices(case: MultiModalVolume, n: int = 15) -> MultiModalVolume:
    """Drop the top and bottom ``n`` axial slices from every volume and the mask."""
    depth = case.shape[2]
    if depth <= 2 * n:
        raise ValueError(f"volume too shallow: depth {depth} cannot lose 2x{n} slices")
    if n == 0:
        return case
    volumes = {
        m: vol.with_data(vol.data[:, :, n : depth - n])
        for m, vol in case.volumes.items()
    }
    seg = case.seg_mask[:, :, n : depth - n] if case.seg_mask is not None else None
    return MultiModalVolume(volumes=volumes, case_id=case.case_id, seg_mask=seg)


def normalize_intensity(v: Volume) -> Volume:
    """Affinely map [min, max] onto [0, 1]; constant volumes map to all zeros."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return v.with_data(np.zeros_like(v.data, dtype=np.float32))
    scaled = (v.data.astype(np.float32) - lo) / (hi - lo)
    return v.with_data(scaled)


def preprocess_case(case: MultiModalVolume, cfg: PreprocessConfig | None = None) -> MultiModalVolume:
    """Run the full clip -> trim -> normalize pipeline on one case."""
    cfg = cfg or PreprocessConfig()
    violations = validate_case(case)
    if violations:
        raise ValueError(f"case {case.case_id} failed validation: {violations}")
    clipped = MultiModalVolume(
        volumes={m: percentile_clip(vol, cfg) for m, vol in case.volumes.items()},
        case_id=case.case_id,
        seg_mask=case.seg_mask,
    )
    trimmed = trim_axial_slices(clipped, cfg.trim_slices)
    normalized = MultiModalVolume(
        volumes={m: normalize_intensity(vol) for m, vol in trimmed.volumes.items()},
        case_id=case.case_id,
        seg_mask=trimmed.seg_mask,
    )
    return normalized


def applied_parameters(cfg: PreprocessConfig) -> dict:
    """The parameter record stored in dataset manifests."""
    params = asdict(cfg)
    params["normalize_to"] = list(cfg.normalize_to)
    params["pipeline"] = ["percentile_clip", "trim_axial_slices", "normalize_intensity"]
    return params


@dataclass(frozen=True)
class SliceTemplate:
    """An unmasked 4-channel axial slice; becomes a SliceSample once a channel is zeroed."""

    x: np.ndarray  # (4, H, W), canonical channel order
    mask_slice: np.ndarray  # (H, W) binary
    slice_index: int  # 1-based depth index
    case_id: str = ""


def extract_axial_slices(case: MultiModalVolume) -> list[SliceTemplate]:
    """Split a case into per-slice 4-channel stacks, depth index ascending."""
    stacked = case.stacked()  # (4, H, W, D)
    depth = stacked.shape[3]
    if case.seg_mask is not None:
        mask = case.seg_mask
    else:
        mask = np.zeros(case.shape, dtype=np.uint8)
    return [
        SliceTemplate(
            x=np.ascontiguousarray(stacked[:, :, :, f]),
            mask_slice=np.ascontiguousarray(mask[:, :, f]),
            slice_index=f + 1,
            case_id=case.case_id,
        )
        for f in range(depth)
    ]


def simulate_missing_modality(
    sample: SliceTemplate, rng: int | np.random.Generator
) -> SliceSample:
    """Zero one channel, chosen uniformly at random, keeping the original as target."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    missing = MODALITY_ORDER[int(rng.integers(len(MODALITY_ORDER)))]
    return mask_modality(sample, missing)


def mask_modality(sample: SliceTemplate, missing: ModalityId) -> SliceSample:
    """Zero a specific channel (the deterministic core of the simulation)."""
    x = sample.x.copy()
    x[missing.channel] = 0.0
    return SliceSample(
        x=x,
        target=sample.x,
        mask_slice=sample.mask_slice,
        missing=missing,
        slice_index=sample.slice_index,
        case_id=sample.case_id,
    )
