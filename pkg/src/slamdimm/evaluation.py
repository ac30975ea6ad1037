"""Quantitative evaluation: volumetric SSIM, depth-coherence, difference
maps, and per-case reports.

The volumetric SSIM delegates to the same windowed implementation used as
the training loss, so train-time and eval-time numbers are directly
comparable. Segmentation-overlap metrics (Dice, HD95) operate on externally
produced masks only; no segmentation is performed here.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .core import ModalityId, MultiModalVolume, Volume
from .inference import synthesize_missing_volume
from .losses import ssim
from .volumetric import refine_volume

__all__ = [
    "EvalReport",
    "ssim_3d",
    "coherence_metric",
    "difference_map",
    "difference_map_triplet",
    "evaluate_case",
    "dice_score",
    "hd95",
    "reports_to_csv",
]

DIFF_MAP_SCALE = 0.5  # |a - b| values at or above this render as white


@dataclass(frozen=True)
class EvalReport:
    """Everything measured for one (case, missing modality) evaluation."""

    case_id: str
    missing: str
    ssim_mmg: float
    ssim_cen: float | None
    coherence_original: float
    coherence_mmg: float
    coherence_cen: float | None
    runtime_seconds: float
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(**json.loads(text))


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def ssim_3d(pred, gt) -> float:
    """Volumetric SSIM over the whole grid (shared windowed formula)."""
    a = torch.from_numpy(np.ascontiguousarray(_as_array(pred))).double()
    b = torch.from_numpy(np.ascontiguousarray(_as_array(gt))).double()
    return float(ssim(a, b))


def coherence_metric(v) -> float:
    """Mean absolute finite difference between consecutive axial slices.

    Zero for depth-constant volumes; 1.0 for alternating all-0/all-1
    slices. Lower is smoother along depth.
    """
    data = _as_array(v)
    if data.shape[2] < 2:
        return 0.0
    return float(np.abs(np.diff(data.astype(np.float64), axis=2)).mean())


def difference_map(a, b, path: str | Path) -> Path:
    """|a - b| of one slice or volume mid-slice, written as 8-bit grayscale PNG.

    The linear display scale is fixed: 0 maps to black and DIFF_MAP_SCALE
    (and above) to white, so maps are comparable across cases. The scale is
    recorded in the filename.
    """
    diff = np.abs(_as_array(a).astype(np.float64) - _as_array(b).astype(np.float64))
    if diff.ndim == 3:
        diff = diff[:, :, diff.shape[2] // 2]
    quantized = np.clip(diff / DIFF_MAP_SCALE, 0.0, 1.0)
    img = np.round(quantized * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="L").save(path)
    return path


def difference_map_triplet(
    original, mmg, cen, out_dir: str | Path, case_id: str, missing: str
) -> list[Path]:
    """Emit the O-M / O-C / M-C difference maps for one evaluated case."""
    out_dir = Path(out_dir)
    scale_tag = f"s{DIFF_MAP_SCALE:.2f}"
    written = []
    pairs = [("O-M", original, mmg)]
    if cen is not None:
        pairs += [("O-C", original, cen), ("M-C", mmg, cen)]
    for tag, a, b in pairs:
        name = f"{case_id}_{missing}_{tag}_{scale_tag}.png"
        written.append(difference_map(a, b, out_dir / name))
    return written


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def evaluate_case(
    case: MultiModalVolume,
    missing: ModalityId,
    mmg_model,
    sched,
    cen_model=None,
    t_test: int = 500,
    single_step: bool = False,
    seed: int = 0,
    subvolume_factor: int = 10,
    device: str = "cpu",
    extra_config: dict | None = None,
) -> tuple[EvalReport, Volume, Volume | None]:
    """Synthesize the missing modality and score it against the ground truth.

    The ground-truth volume of the missing modality is used for scoring
    only; the synthesis input has that channel zeroed. Returns the report
    plus the synthesized (and optionally refined) volumes so callers can
    render figures without re-running inference.
    """
    h, w = case.shape[:2]
    if (h, w) != mmg_model.cfg.image_size:
        raise ValueError(
            f"case {case.case_id} is {h}x{w} in-plane but the checkpoint was "
            f"built for {mmg_model.cfg.image_size}"
        )
    start = time.perf_counter()
    rng = torch.Generator(device="cpu").manual_seed(seed)
    v_mmg = synthesize_missing_volume(
        case, missing, mmg_model, sched, t_test=t_test, rng=rng,
        single_step=single_step, device=device,
    )
    v_cen = None
    if cen_model is not None:
        v_cen = refine_volume(v_mmg, cen_model, s=subvolume_factor, device=device)
    runtime = time.perf_counter() - start

    gt = case.volumes[missing]
    cfg = {
        "arch": mmg_model.cfg.to_dict(),
        "schedule": sched.to_dict(),
        "t_test": t_test,
        "single_step": single_step,
        "seed": seed,
        "cen": cen_model.cfg.to_dict() if cen_model is not None else None,
        "subvolume_factor": subvolume_factor,
    }
    cfg.update(extra_config or {})
    report = EvalReport(
        case_id=case.case_id,
        missing=missing.value,
        ssim_mmg=ssim_3d(v_mmg, gt),
        ssim_cen=ssim_3d(v_cen, gt) if v_cen is not None else None,
        coherence_original=coherence_metric(gt),
        coherence_mmg=coherence_metric(v_mmg),
        coherence_cen=coherence_metric(v_cen) if v_cen is not None else None,
        runtime_seconds=runtime,
        config_hash=config_hash(cfg),
    )
    return report, v_mmg, v_cen


def reports_to_csv(reports: list[EvalReport], path: str | Path) -> Path:
    """Aggregate table in the missing-modality-row x model-column layout.

    SSIM is reported as a percentage. Rows average all cases sharing the
    same missing modality; a trailing per-case section keeps the raw values.
    """
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_missing: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_missing.setdefault(r.missing, []).append(r)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["missing", "n_cases", "ssim_mmg_pct", "ssim_cen_pct"])
        for m in ModalityId:
            group = by_missing.get(m.value)
            if not group:
                continue
            mmg = 100.0 * float(np.mean([r.ssim_mmg for r in group]))
            cen_vals = [r.ssim_cen for r in group if r.ssim_cen is not None]
            cen = f"{100.0 * float(np.mean(cen_vals)):.4f}" if cen_vals else ""
            writer.writerow([m.value, len(group), f"{mmg:.4f}", cen])
        writer.writerow([])
        writer.writerow(["case_id", "missing", "ssim_mmg", "ssim_cen", "runtime_seconds"])
        for r in reports:
            writer.writerow(
                [
                    r.case_id,
                    r.missing,
                    f"{r.ssim_mmg:.6f}",
                    "" if r.ssim_cen is None else f"{r.ssim_cen:.6f}",
                    f"{r.runtime_seconds:.3f}",
                ]
            )
    return path


# ---------------------------------------------------------------------------
# Overlap metrics for externally produced segmentation masks
# ---------------------------------------------------------------------------


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; 1.0 when both are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / float(total)


def _surface(mask: np.ndarray) -> np.ndarray:
    eroded = ndimage.binary_erosion(mask, iterations=1, border_value=0)
    return mask & ~eroded


def hd95(a: np.ndarray, b: np.ndarray, spacing: tuple[float, ...] | None = None) -> float:
    """95th-percentile symmetric surface distance between two binary masks.

    Distances from each surface voxel of one mask to the nearest surface
    voxel of the other are pooled in both directions; the 95th percentile
    of the pooled set is returned. Infinite when exactly one mask is empty,
    0.0 when both are.
    """
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float("inf")
    sa = _surface(a)
    sb = _surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    pooled = np.concatenate([dist_to_b[sa], dist_to_a[sb]])
    return float(np.percentile(pooled, 95))
