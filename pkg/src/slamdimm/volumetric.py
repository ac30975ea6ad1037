"""Sliding-window machinery for the volumetric refiner.

Volumes are carved into overlapping depth windows (full H x W extent),
refined window by window, and blended back with per-voxel weights that sum
to one, so an identity refiner reconstructs the input exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import Volume

__all__ = [
    "WindowPlan",
    "plan_windows",
    "extract_subvolume",
    "stitch_subvolumes",
    "refine_volume",
]


@dataclass(frozen=True)
class WindowPlan:
    """Window starts and blend weights covering a volume of the given depth."""

    depth: int
    window_depth: int
    stride: int
    starts: tuple[int, ...]
    weights: np.ndarray  # (num_windows, window_depth), per-voxel sums are 1
    weighting: str = "uniform"

    @property
    def num_windows(self) -> int:
        return len(self.starts)


def plan_windows(
    depth: int,
    s: int = 10,
    window_depth: int | None = None,
    weighting: str = "uniform",
) -> WindowPlan:
    """Enumerate overlapping depth windows of size D/s with stride D/(2s).

    For depths not divisible by the subvolume factor, the window size and
    stride floor and a final end-aligned window is added so coverage stays
    total. ``window_depth`` overrides the computed size (used when a
    trained refiner pins its input depth).
    """
    if s < 1:
        raise ValueError("subvolume factor must be >= 1")
    w_d = window_depth if window_depth is not None else depth // s
    if w_d < 1 or depth < w_d:
        raise ValueError(
            f"depth {depth} is shallower than the window depth {w_d}; pad the "
            f"volume along depth before windowed refinement"
        )
    stride = max(1, depth // (2 * s))

    starts = list(range(0, depth - w_d + 1, stride))
    if starts[-1] != depth - w_d:
        starts.append(depth - w_d)  # clamp the final window end-aligned

    if weighting == "uniform":
        profile = np.ones(w_d, dtype=np.float64)
    elif weighting == "ramp":
        ramp = np.minimum(np.arange(1, w_d + 1), np.arange(w_d, 0, -1))
        profile = ramp.astype(np.float64)
    else:
        raise ValueError(f"unknown weighting {weighting!r} (use 'uniform' or 'ramp')")

    accum = np.zeros(depth, dtype=np.float64)
    for start in starts:
        accum[start : start + w_d] += profile
    weights = np.stack([profile / accum[start : start + w_d] for start in starts])

    return WindowPlan(
        depth=depth,
        window_depth=w_d,
        stride=stride,
        starts=tuple(starts),
        weights=weights,
        weighting=weighting,
    )


def extract_subvolume(v: np.ndarray, start: int, window_depth: int) -> np.ndarray:
    """View of slices [start, start + window_depth) along depth."""
    depth = v.shape[2]
    if start < 0 or start + window_depth > depth:
        raise ValueError(
            f"window [{start}, {start + window_depth}) out of range for depth {depth}"
        )
    return v[:, :, start : start + window_depth]


def stitch_subvolumes(plan: WindowPlan, subvolumes: list[np.ndarray]) -> np.ndarray:
    """Blend refined windows back into a full volume using the plan weights."""
    if len(subvolumes) != plan.num_windows:
        raise ValueError(
            f"plan has {plan.num_windows} windows but got {len(subvolumes)} subvolumes"
        )
    hw = subvolumes[0].shape[:2]
    out = np.zeros(hw + (plan.depth,), dtype=np.float64)
    for w, (start, sub) in enumerate(zip(plan.starts, subvolumes)):
        if sub.shape != hw + (plan.window_depth,):
            raise ValueError(
                f"subvolume {w} has shape {sub.shape}, expected {hw + (plan.window_depth,)}"
            )
        out[:, :, start : start + plan.window_depth] += sub * plan.weights[w][None, None, :]
    return out.astype(np.float32)


def refine_volume(
    v: Volume | np.ndarray,
    model,
    s: int = 10,
    weighting: str = "uniform",
    batch_size: int = 4,
    device: str = "cpu",
) -> Volume | np.ndarray:
    """Run the refiner across a full volume: plan, refine windows, stitch.

    The window depth comes from the model's configured shape; the factor
    ``s`` only sets the stride. In-plane dimensions must match the model.
    """
    data = v.data if isinstance(v, Volume) else v
    win_h, win_w, win_d = model.cfg.window_shape
    if data.shape[:2] != (win_h, win_w):
        raise ValueError(
            f"volume is {data.shape[0]}x{data.shape[1]} in-plane but the refiner "
            f"expects {win_h}x{win_w}"
        )
    plan = plan_windows(data.shape[2], s=s, window_depth=win_d, weighting=weighting)

    windows = [
        np.ascontiguousarray(extract_subvolume(data, start, plan.window_depth))
        for start in plan.starts
    ]
    refined: list[np.ndarray] = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = torch.from_numpy(np.stack(windows[i : i + batch_size])).float()
            out = model(batch.unsqueeze(1).to(device))
            refined.extend(out[:, 0].cpu().numpy())
    stitched = stitch_subvolumes(plan, refined)
    return v.with_data(stitched) if isinstance(v, Volume) else stitched
