"""Slice-wise synthesis of a missing modality and depth concatenation.

The inference path mirrors training: the missing channel is zeroed before
encoding (the ground truth never reaches the network), the latent is
refined through the diffusion bottleneck at a fixed starting step, and the
target decoder produces each slice. Slices are processed in mini-batches
and concatenated along depth into the output volume.
"""

from __future__ import annotations

import numpy as np
import torch

from .core import ModalityId, MultiModalVolume, Volume
from .diffusion import NoiseSchedule, refine_latent
from .networks import MmgModel

__all__ = ["synthesize_missing_volume", "masked_input_stack"]

DEFAULT_T_TEST = 500


def masked_input_stack(case: MultiModalVolume, missing: ModalityId) -> np.ndarray:
    """(4, H, W, D) input with the missing modality's channel zeroed."""
    stack = case.stacked().astype(np.float32)
    stack[missing.channel] = 0.0
    return stack


def synthesize_missing_volume(
    case: MultiModalVolume,
    missing: ModalityId,
    model: MmgModel,
    sched: NoiseSchedule,
    t_test: int = DEFAULT_T_TEST,
    rng: torch.Generator | None = None,
    single_step: bool = False,
    batch_size: int = 8,
    device: str = "cpu",
) -> Volume:
    """Reconstruct the missing modality for every axial slice of a case."""
    stack = masked_input_stack(case, missing)
    depth = stack.shape[3]
    if rng is None:
        rng = torch.Generator(device="cpu").manual_seed(0)

    model.eval()
    out_slices = []
    with torch.no_grad():
        for lo in range(0, depth, batch_size):
            hi = min(lo + batch_size, depth)
            x = torch.from_numpy(
                np.ascontiguousarray(np.moveaxis(stack[:, :, :, lo:hi], 3, 0))
            ).to(device)
            z = model.encode(x)
            z_tilde = refine_latent(
                z, model.denoise_eps, sched, t_test=t_test, rng=rng, single_step=single_step
            )
            decoded = model.decode_modality(z_tilde, missing)  # (n, H, W)
            out_slices.append(decoded.cpu().numpy())
    data = np.moveaxis(np.concatenate(out_slices, axis=0), 0, 2).astype(np.float32)

    ref = case.volumes[missing]
    return Volume(data=data, modality=missing, spacing=ref.spacing, affine=ref.affine)
