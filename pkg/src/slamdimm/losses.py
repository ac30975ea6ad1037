"""Training objectives: weighted reconstruction, latent consistency, SSIM.

The SSIM here is the one implementation used everywhere: as a loss term
during training and as the evaluation metric (see evaluation.ssim_3d).
Pixel/voxel reductions are sums per sample (matching the summed residual
definitions); batched inputs are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "LossWeights",
    "ssim",
    "ssim_loss",
    "weighted_image_loss",
    "latent_consistency_loss",
    "mmg_total_loss",
    "cen_total_loss",
    "MmgLossValues",
    "CenLossValues",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the composite objectives."""

    lambda1: float = 4.0  # lesion-region emphasis in the image loss
    lambda2: float = 2.0  # latent-consistency strength
    gamma1: float = 0.5  # SSIM weight in the slice objective
    gamma2: float = 0.1  # SSIM weight in the volumetric refiner objective

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.gamma2 <= 1.0):
            raise ValueError("gamma2 must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


def _gaussian_1d(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Separable valid-mode Gaussian filtering of (M, 1, *spatial) tensors."""
    k = kernel.numel()
    if x.dim() == 4:
        x = F.conv2d(x, kernel.view(1, 1, k, 1))
        x = F.conv2d(x, kernel.view(1, 1, 1, k))
    else:
        x = F.conv3d(x, kernel.view(1, 1, k, 1, 1))
        x = F.conv3d(x, kernel.view(1, 1, 1, k, 1))
        x = F.conv3d(x, kernel.view(1, 1, 1, 1, k))
    return x


def _ssim_per_image(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """SSIM for a stack (M, 1, *spatial) of image pairs; returns (M,) values.

    Uses 11-tap Gaussian windows (sigma 1.5) in valid mode, averaged over
    all window positions. Inputs smaller than the window in any spatial
    axis fall back to a single global window with uniform weights.
    """
    spatial = a.shape[2:]
    if min(spatial) >= SSIM_WINDOW:
        kernel = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA, a.dtype, a.device)
        mu_a = _blur(a, kernel)
        mu_b = _blur(b, kernel)
        var_a = _blur(a * a, kernel) - mu_a**2
        var_b = _blur(b * b, kernel) - mu_b**2
        cov = _blur(a * b, kernel) - mu_a * mu_b
    else:
        dims = tuple(range(2, a.dim()))
        mu_a = a.mean(dim=dims, keepdim=True)
        mu_b = b.mean(dim=dims, keepdim=True)
        var_a = ((a - mu_a) ** 2).mean(dim=dims, keepdim=True)
        var_b = ((b - mu_b) ** 2).mean(dim=dims, keepdim=True)
        cov = ((a - mu_a) * (b - mu_b)).mean(dim=dims, keepdim=True)

    ssim_map = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    return ssim_map.mean(dim=tuple(range(1, ssim_map.dim())))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x)


def ssim(a, b) -> torch.Tensor:
    """Structural similarity of two 2D or 3D grids in [0, 1]; scalar in [-1, 1]."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() not in (2, 3):
        raise ValueError(f"ssim expects a 2D or 3D grid, got {a.dim()}D")
    if not a.is_floating_point():
        a = a.double()
    if not b.is_floating_point():
        b = b.double()
    return _ssim_per_image(a[None, None], b[None, None])[0]


def _check_slice_shapes(x_hat: torch.Tensor, x: torch.Tensor) -> bool:
    """Validate (4, H, W) / (N, 4, H, W) pairs; returns True when batched."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if x_hat.dim() == 3:
        return False
    if x_hat.dim() == 4:
        return True
    raise ValueError(f"expected (4, H, W) or (N, 4, H, W), got {tuple(x_hat.shape)}")


def ssim_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Sum over the four modality channels of (1 - SSIM); batch-averaged."""
    batched = _check_slice_shapes(x_hat, x)
    if not batched:
        x_hat = x_hat[None]
        x = x[None]
    n, c = x_hat.shape[:2]
    values = _ssim_per_image(
        x_hat.reshape(n * c, 1, *x_hat.shape[2:]), x.reshape(n * c, 1, *x.shape[2:])
    ).reshape(n, c)
    return (1.0 - values).sum(dim=1).mean()


def weighted_image_loss(
    x_hat: torch.Tensor, x: torch.Tensor, seg: torch.Tensor, lambda1: float
) -> torch.Tensor:
    """Reconstruction error with lesion voxels up-weighted by (1 + lambda1).

    The weight multiplies the residual before squaring, so lesion pixels
    contribute (1 + lambda1)^2 times what an equal background residual
    would. Summed over all four channels and pixels; batch-averaged.
    """
    batched = _check_slice_shapes(x_hat, x)
    expected_seg = x.shape[:1] + x.shape[2:] if batched else x.shape[1:]
    if seg.shape != expected_seg:
        raise ValueError(f"seg shape {tuple(seg.shape)} does not match slices {tuple(x.shape)}")
    weight = 1.0 + lambda1 * seg.to(x.dtype)
    weight = weight.unsqueeze(1) if batched else weight.unsqueeze(0)
    residual = (x_hat - x) * weight
    per_sample = (residual**2).sum(dim=tuple(range(1, residual.dim())) if batched else None)
    return per_sample.mean() if batched else per_sample


def latent_consistency_loss(
    z_tilde: torch.Tensor, z: torch.Tensor, lambda2: float
) -> torch.Tensor:
    """lambda2 * ||z_tilde - z||^2 with the target z detached; batch-averaged.

    Only the refined latent receives gradient: the encoder output acts as a
    fixed target here (it still gets gradients through the image loss).
    """
    if z_tilde.shape != z.shape:
        raise ValueError(f"latent shape mismatch: {tuple(z_tilde.shape)} vs {tuple(z.shape)}")
    diff = z_tilde - z.detach()
    if diff.dim() == 4:  # batched (N, C, h, w)
        return lambda2 * (diff**2).sum(dim=(1, 2, 3)).mean()
    return lambda2 * (diff**2).sum()


@dataclass(frozen=True)
class MmgLossValues:
    rec_img: torch.Tensor
    latent: torch.Tensor
    ssim: torch.Tensor
    total: torch.Tensor


def mmg_total_loss(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    seg: torch.Tensor,
    z_tilde: torch.Tensor,
    z: torch.Tensor,
    weights: LossWeights,
) -> MmgLossValues:
    """Slice objective: weighted image loss + latent consistency + gamma1 * SSIM term."""
    rec = weighted_image_loss(x_hat, x, seg, weights.lambda1)
    lat = latent_consistency_loss(z_tilde, z, weights.lambda2)
    ssim_term = ssim_loss(x_hat, x)
    total = rec + lat + weights.gamma1 * ssim_term
    return MmgLossValues(rec_img=rec, latent=lat, ssim=ssim_term, total=total)


@dataclass(frozen=True)
class CenLossValues:
    rec: torch.Tensor
    ssim: torch.Tensor
    total: torch.Tensor


def cen_total_loss(
    v_hat: torch.Tensor, v: torch.Tensor, gamma2: float
) -> CenLossValues:
    """Volumetric refiner objective: plain squared error + gamma2 * (1 - SSIM).

    Accepts a single (H, W, D) subvolume or a batch (N, H, W, D). No
    spatial mask weighting: the refiner runs at inference where no lesion
    mask exists.
    """
    if v_hat.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(v_hat.shape)} vs {tuple(v.shape)}")
    if v_hat.dim() == 3:
        v_hat = v_hat[None]
        v = v[None]
    elif v_hat.dim() != 4:
        raise ValueError(f"expected (H, W, D) or (N, H, W, D), got {tuple(v_hat.shape)}")
    rec = (v_hat - v).pow(2).sum(dim=(1, 2, 3)).mean()
    ssim_vals = _ssim_per_image(v_hat.unsqueeze(1), v.unsqueeze(1))
    ssim_term = (1.0 - ssim_vals).mean()
    total = rec + gamma2 * ssim_term
    return CenLossValues(rec=rec, ssim=ssim_term, total=total)
