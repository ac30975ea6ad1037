"""Synthetic multi-modal brain-like phantoms for desk-scale runs.

Each phantom is a bundle of ellipsoidal "tissue" regions. A region carries a
3-vector of latent tissue coordinates and every modality's intensity is a
fixed linear mix of those coordinates (times a shared radial shading field).
Because the mixing is linear with zero intercept, any one modality is an
exact linear function of the other three, so the missing-modality task is
solvable by construction and small models can learn it in minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MODALITY_ORDER, MultiModalVolume, Volume

__all__ = ["PhantomSpec", "generate_phantom_case", "MIXING_MATRIX"]

# Modality intensity = MIXING_MATRIX @ tissue_coordinates, rows in canonical
# channel order. Rows are nonnegative with sums <= 1 so intensities stay in
# [0, 1]; every 3-row submatrix is invertible so each modality is recoverable
# from the other three.
MIXING_MATRIX = np.array(
    [
        [0.70, 0.20, 0.10],  # t1ce
        [0.15, 0.70, 0.15],  # t1w
        [0.10, 0.25, 0.65],  # flair
        [0.55, 0.10, 0.35],  # t2w
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs for one synthetic case. Defaults are the desk-scale test shape."""

    height: int = 64
    width: int = 64
    depth: int = 32
    num_regions: int = 5
    lesion_count: int = 1
    lesion_radius: float = 0.12  # fraction of the in-plane half-extent
    noise_level: float = 0.0
    shading: float = 0.15
    seed: int = 0
    case_id: str = ""

    def resolved_case_id(self) -> str:
        return self.case_id or f"phantom_{self.seed:04d}"


def _ellipsoid_mask(grids, center, semi_axes) -> np.ndarray:
    xx, yy, zz = grids
    cx, cy, cz = center
    ax, ay, az = semi_axes
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0


def generate_phantom_case(spec: PhantomSpec) -> MultiModalVolume:
    """Build one deterministic phantom case from the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width, spec.depth)

    # Normalized coordinates in [-1, 1] per axis.
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    grids = np.meshgrid(*axes, indexing="ij")

    brain = _ellipsoid_mask(grids, (0.0, 0.0, 0.0), (0.82, 0.86, 0.90))

    # Latent tissue coordinates per voxel, (3, H, W, D). Background stays 0.
    u = np.zeros((3,) + shape, dtype=np.float64)
    base = rng.uniform(0.25, 0.45, size=3)
    u[:, brain] = base[:, None]

    for _ in range(spec.num_regions):
        center = rng.uniform(-0.45, 0.45, size=3)
        semi = rng.uniform(0.12, 0.38, size=3)
        region = _ellipsoid_mask(grids, center, semi) & brain
        coords = rng.uniform(0.15, 0.95, size=3)
        u[:, region] = coords[:, None]

    lesion_mask = np.zeros(shape, dtype=np.uint8)
    for _ in range(spec.lesion_count):
        center = rng.uniform(-0.35, 0.35, size=3)
        semi = rng.uniform(0.5, 1.0, size=3) * spec.lesion_radius * 2.0
        lesion = _ellipsoid_mask(grids, center, semi) & brain
        coords = rng.uniform(0.6, 0.95, size=3)
        u[:, lesion] = coords[:, None]
        lesion_mask[lesion] = 1

    # Shared multiplicative shading keeps cross-modal linearity exact.
    r2 = grids[0] ** 2 + grids[1] ** 2 + grids[2] ** 2
    shade = 1.0 - spec.shading * np.clip(r2, 0.0, 1.0)

    intensities = np.einsum("mc,c...->m...", MIXING_MATRIX, u) * shade[None]

    if spec.noise_level > 0:
        intensities = intensities + rng.normal(0.0, spec.noise_level, size=intensities.shape)
    intensities = np.clip(intensities, 0.0, 1.0).astype(np.float32)

    volumes = {
        m: Volume(data=intensities[i], modality=m)
        for i, m in enumerate(MODALITY_ORDER)
    }
    return MultiModalVolume(
        volumes=volumes, case_id=spec.resolved_case_id(), seg_mask=lesion_mask
    )
