"""Latent diffusion math: noise schedule, forward corruption, reverse sampling.

Time steps are 1-based: t runs over 1..T, with t=0 reserved to mean "no
corruption". Latents are torch tensors of shape (C, h, w) or batched
(N, C, h, w); every sampling routine takes an explicit torch.Generator so
callers own determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "forward_sample",
    "forward_step",
    "predict_z0",
    "reverse_step",
    "refine_latent",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables. Index [t-1] holds the value for step t.

    alpha_t = 1 - beta_t, and alpha_bar_t is the running product of alpha
    up to t; both are precomputed in float64 and exposed as torch tensors.
    """

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def num_steps(self) -> int:
        return self.beta.shape[0]

    def check_step(self, t: int) -> None:
        if not (1 <= t <= self.num_steps):
            raise ValueError(f"step t={t} out of range [1, {self.num_steps}]")

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar_{t-1}, with the t=1 convention alpha_bar_0 = 1."""
        return float(self.alpha_bar[t - 2]) if t > 1 else 1.0

    def posterior_variance(self, t: int) -> float:
        """sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t=1."""
        self.check_step(t)
        return float(self.beta[t - 1]) * (1.0 - self.alpha_bar_prev(t)) / (
            1.0 - float(self.alpha_bar[t - 1])
        )

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
        }

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        return build_linear_schedule(d["num_steps"], d["beta_start"], d["beta_end"])


def build_linear_schedule(
    num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    """Linearly spaced beta_t from beta_start (t=1) to beta_end (t=T)."""
    if num_steps < 2:
        raise ValueError(f"need at least 2 steps, got {num_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        beta=torch.from_numpy(beta),
        alpha=torch.from_numpy(alpha),
        alpha_bar=torch.from_numpy(alpha_bar),
    )


def _randn_like(z: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
    return torch.randn(z.shape, generator=rng, dtype=z.dtype, device=z.device)


def forward_sample(
    z0: torch.Tensor, t: int, sched: NoiseSchedule, rng: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Jump straight from z0 to its noised version at step t (closed form).

    Returns (zt, eps) with zt = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, so
    the injected noise is available as an epsilon-prediction target.
    """
    sched.check_step(t)
    abar = float(sched.alpha_bar[t - 1])
    eps = _randn_like(z0, rng)
    zt = np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps
    return zt, eps


def forward_step(
    z_prev: torch.Tensor, t: int, sched: NoiseSchedule, rng: torch.Generator | None = None
) -> torch.Tensor:
    """One Markov corruption step z_{t-1} -> z_t."""
    sched.check_step(t)
    beta = float(sched.beta[t - 1])
    eps = _randn_like(z_prev, rng)
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * eps


def predict_z0(
    zt: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Invert the closed-form corruption given a noise estimate."""
    sched.check_step(t)
    abar = float(sched.alpha_bar[t - 1])
    return (zt - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def reverse_step(
    zt: torch.Tensor,
    t: int,
    denoiser,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Sample z_{t-1} from the learned reverse kernel.

    ``denoiser(zt, t)`` must return the epsilon estimate at step t. The
    posterior mean follows from it; the variance is the fixed
    beta_t (1 - abar_{t-1}) / (1 - abar_t), which vanishes at t=1 so the
    final step is deterministic.
    """
    sched.check_step(t)
    eps_hat = denoiser(zt, t)
    beta = float(sched.beta[t - 1])
    alpha = float(sched.alpha[t - 1])
    abar = float(sched.alpha_bar[t - 1])
    mean = (zt - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    sigma = np.sqrt(sched.posterior_variance(t))
    return mean + sigma * _randn_like(zt, rng)


def refine_latent(
    z: torch.Tensor,
    denoiser,
    sched: NoiseSchedule,
    t_test: int = 500,
    rng: torch.Generator | None = None,
    single_step: bool = False,
) -> torch.Tensor:
    """Inference-time latent refinement: corrupt to t_test, then denoise back.

    t_test=0 is the identity. With ``single_step`` the chain is replaced by
    one epsilon estimate at t_test and the closed-form inversion; otherwise
    the full reverse chain t_test -> 1 runs.
    """
    if t_test == 0:
        return z
    sched.check_step(t_test)
    zt, _ = forward_sample(z, t_test, sched, rng)
    if single_step:
        return predict_z0(zt, denoiser(zt, t_test), t_test, sched)
    for t in range(t_test, 0, -1):
        zt = reverse_step(zt, t, denoiser, sched, rng)
    return zt
