"""Network architectures: shared encoder, modality decoders, latent denoiser,
and the transformer-based volumetric coherence refiner.

Shape conventions: slices are (N, 4, H, W); latents are (N, C, h, w) with
h = H / 2^(num_blocks-1); subvolumes are (N, 1, H, W, Dw).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import MODALITY_ORDER, ModalityId

__all__ = [
    "MmgArchConfig",
    "CenArchConfig",
    "MmgModel",
    "CoherenceNet",
    "build_mmg_model",
    "build_cen_model",
    "sinusoidal_time_embedding",
]


def _norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


def _zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of (N,) step indices into (N, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv x2 with skip; optional additive time conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int | None = None):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-layer spatial self-attention used at the denoiser's lowest resolution."""

    def __init__(self, channels: int, num_heads: int = 4):
        super().__init__()
        while channels % num_heads != 0:
            num_heads //= 2
        self.norm = _norm(channels)
        self.attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)

    def forward(self, x):
        n, c, h, w = x.shape
        seq = self.norm(x).reshape(n, c, h * w).transpose(1, 2)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        return x + out.transpose(1, 2).reshape(n, c, h, w)


@dataclass(frozen=True)
class MmgArchConfig:
    """Architecture of the slice-synthesis model (encoder, denoiser, decoders)."""

    num_blocks: int = 3
    residual_subblocks: int = 5
    base_channels: int = 64
    latent_channels: int = 0  # 0 -> 4 * base_channels
    input_channels: int = 4
    time_embedding_dim: int = 0  # 0 -> 4 * base_channels
    image_size: tuple[int, int] = (240, 240)

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.residual_subblocks < 1:
            raise ValueError("residual_subblocks must be >= 1")
        h, w = self.image_size
        # The encoder halves the grid (num_blocks - 1) times and the latent
        # denoiser halves it again, so both factors must divide the image.
        total = self.downsample_factor**2
        if h % total or w % total:
            raise ValueError(
                f"image size {self.image_size} must be divisible by {total} "
                f"(encoder and denoiser each downsample by {self.downsample_factor})"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.num_blocks - 1)

    @property
    def latent_dim(self) -> int:
        return self.latent_channels or 4 * self.base_channels

    @property
    def time_dim(self) -> int:
        return self.time_embedding_dim or 4 * self.base_channels

    @property
    def latent_size(self) -> tuple[int, int]:
        return (
            self.image_size[0] // self.downsample_factor,
            self.image_size[1] // self.downsample_factor,
        )

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "residual_subblocks": self.residual_subblocks,
            "base_channels": self.base_channels,
            "latent_channels": self.latent_channels,
            "input_channels": self.input_channels,
            "time_embedding_dim": self.time_embedding_dim,
            "image_size": list(self.image_size),
        }

    @staticmethod
    def from_dict(d: dict) -> "MmgArchConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return MmgArchConfig(**d)


class SharedEncoder(nn.Module):
    """Downsampling path mapping a 4-channel slice to the shared latent."""

    def __init__(self, cfg: MmgArchConfig):
        super().__init__()
        widths = [cfg.base_channels * 2**b for b in range(cfg.num_blocks)]
        self.stem = nn.Conv2d(cfg.input_channels, widths[0], 3, padding=1)
        stages = []
        for b, width in enumerate(widths):
            for _ in range(cfg.residual_subblocks):
                stages.append(ResidualBlock(width, width))
            if b + 1 < len(widths):
                stages.append(nn.Conv2d(width, widths[b + 1], 3, stride=2, padding=1))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(
            _norm(widths[-1]), nn.SiLU(), nn.Conv2d(widths[-1], cfg.latent_dim, 1)
        )
        self.downsample_factor = cfg.downsample_factor

    def forward(self, x):
        h, w = x.shape[-2:]
        f = self.downsample_factor
        if h % f or w % f:
            raise ValueError(f"input {h}x{w} not divisible by downsample factor {f}")
        return self.head(self.stages(self.stem(x)))


class ModalityDecoder(nn.Module):
    """Upsampling path from the shared latent to one modality, no skips."""

    def __init__(self, cfg: MmgArchConfig):
        super().__init__()
        widths = [cfg.base_channels * 2**b for b in range(cfg.num_blocks)]
        self.stem = nn.Conv2d(cfg.latent_dim, widths[-1], 1)
        stages = []
        for b in reversed(range(cfg.num_blocks)):
            for _ in range(cfg.residual_subblocks):
                stages.append(ResidualBlock(widths[b], widths[b]))
            if b > 0:
                stages.append(nn.Upsample(scale_factor=2, mode="nearest"))
                stages.append(nn.Conv2d(widths[b], widths[b - 1], 3, padding=1))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(_norm(widths[0]), nn.SiLU(), nn.Conv2d(widths[0], 1, 3, padding=1))

    def forward(self, z):
        return torch.sigmoid(self.head(self.stages(self.stem(z))))


class LatentDenoiser(nn.Module):
    """Time-conditioned UNet predicting the injected noise in latent space.

    Mirrors the encoder/decoder block structure (num_blocks levels of
    residual sub-blocks) with skip connections across levels and
    self-attention at the lowest resolution only.
    """

    def __init__(self, cfg: MmgArchConfig):
        super().__init__()
        widths = [cfg.base_channels * 2**b for b in range(cfg.num_blocks)]
        time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.time_dim = time_dim

        self.stem = nn.Conv2d(cfg.latent_dim, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for b, width in enumerate(widths):
            self.down_blocks.append(
                nn.ModuleList(
                    [ResidualBlock(width, width, time_dim) for _ in range(cfg.residual_subblocks)]
                )
            )
            if b + 1 < len(widths):
                self.downsamplers.append(nn.Conv2d(width, widths[b + 1], 3, stride=2, padding=1))

        self.mid_block1 = ResidualBlock(widths[-1], widths[-1], time_dim)
        self.mid_attn = SelfAttention2d(widths[-1])
        self.mid_block2 = ResidualBlock(widths[-1], widths[-1], time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for b in reversed(range(cfg.num_blocks)):
            width = widths[b]
            blocks = [ResidualBlock(2 * width, width, time_dim)]
            blocks += [
                ResidualBlock(width, width, time_dim) for _ in range(cfg.residual_subblocks - 1)
            ]
            self.up_blocks.append(nn.ModuleList(blocks))
            if b > 0:
                self.upsamplers.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(width, widths[b - 1], 3, padding=1),
                    )
                )

        self.head = nn.Sequential(
            _norm(widths[0]), nn.SiLU(), _zero_init(nn.Conv2d(widths[0], cfg.latent_dim, 3, padding=1))
        )

    def forward(self, zt: torch.Tensor, t) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((zt.shape[0],), int(t), device=zt.device)
        t_emb = self.time_mlp(sinusoidal_time_embedding(t, self.time_dim))

        h = self.stem(zt)
        skips = []
        for b, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, t_emb)
            skips.append(h)
            if b < len(self.downsamplers):
                h = self.downsamplers[b](h)

        h = self.mid_block1(h, t_emb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, t_emb)

        for i, blocks in enumerate(self.up_blocks):
            h = torch.cat([h, skips[-(i + 1)]], dim=1)
            for block in blocks:
                h = block(h, t_emb)
            if i < len(self.upsamplers):
                h = self.upsamplers[i](h)

        return self.head(h)


class MmgModel(nn.Module):
    """Shared encoder + latent denoiser + four independent modality decoders."""

    def __init__(self, cfg: MmgArchConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SharedEncoder(cfg)
        self.denoiser = LatentDenoiser(cfg)
        self.decoders = nn.ModuleDict(
            {m.value: ModalityDecoder(cfg) for m in MODALITY_ORDER}
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        z = self.encoder(x[None] if squeeze else x)
        return z[0] if squeeze else z

    def denoise_eps(self, zt: torch.Tensor, t) -> torch.Tensor:
        squeeze = zt.dim() == 3
        eps = self.denoiser(zt[None] if squeeze else zt, t)
        return eps[0] if squeeze else eps

    def decode_modality(self, z: torch.Tensor, m: ModalityId) -> torch.Tensor:
        if not isinstance(m, ModalityId):
            raise ValueError(f"unknown modality {m!r}")
        squeeze = z.dim() == 3
        out = self.decoders[m.value](z[None] if squeeze else z)
        return out[:, 0][0] if squeeze else out[:, 0]

    def decode_all(self, z: torch.Tensor) -> torch.Tensor:
        """Decode every modality; returns (N, 4, H, W) in canonical channel order."""
        squeeze = z.dim() == 3
        zb = z[None] if squeeze else z
        out = torch.cat([self.decoders[m.value](zb) for m in MODALITY_ORDER], dim=1)
        return out[0] if squeeze else out

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# Volumetric coherence refiner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CenArchConfig:
    """Architecture of the volumetric refiner: ViT encoder + conv decoder."""

    window_shape: tuple[int, int, int] = (240, 240, 16)  # (H, W, window depth)
    patch_size: tuple[int, int, int] = (16, 16, 4)
    embed_dim: int = 256
    depth: int = 8
    num_heads: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        for axis, (n, p) in enumerate(zip(self.window_shape, self.patch_size)):
            if n % p:
                raise ValueError(
                    f"window axis {axis} ({n}) not divisible by patch size {p}"
                )
            if p & (p - 1):
                raise ValueError(f"patch sizes must be powers of two, got {p}")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(n // p for n, p in zip(self.window_shape, self.patch_size))  # type: ignore

    def to_dict(self) -> dict:
        return {
            "window_shape": list(self.window_shape),
            "patch_size": list(self.patch_size),
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @staticmethod
    def from_dict(d: dict) -> "CenArchConfig":
        d = dict(d)
        d["window_shape"] = tuple(d["window_shape"])
        d["patch_size"] = tuple(d["patch_size"])
        return CenArchConfig(**d)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class CoherenceNet(nn.Module):
    """Residual volumetric refiner over fixed-shape subvolumes.

    A ViT encodes the subvolume as patches; a transposed-conv decoder (with
    skips from intermediate transformer states and a full-resolution conv
    stem) produces an additive correction. The correction head is
    zero-initialized, so the network is exactly the identity at init and
    can only move away from its input as training demands.
    """

    def __init__(self, cfg: CenArchConfig):
        super().__init__()
        self.cfg = cfg
        gh, gw, gd = cfg.grid
        num_tokens = gh * gw * gd

        self.patch_embed = nn.Conv3d(1, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

        # One upsampling stage per doubling of the largest patch axis; an
        # axis stops upsampling once it has reached full resolution.
        doublings = [int(math.log2(p)) for p in cfg.patch_size]
        self.num_stages = max(doublings)
        self.stage_strides = [
            tuple(2 if (self.num_stages - s) <= d else 1 for d in doublings)
            for s in range(self.num_stages)
        ]
        widths = [max(16, cfg.embed_dim >> (s + 1)) for s in range(self.num_stages)]

        # Skip taken from the transformer's midpoint, projected and carried
        # up alongside the main path (UNETR-style deep supervision lite).
        self.skip_layer = max(1, cfg.depth // 2)
        self.skip_proj = nn.Conv3d(cfg.embed_dim, widths[0], 1)

        ups = []
        in_ch = cfg.embed_dim
        for s in range(self.num_stages):
            stride = self.stage_strides[s]
            extra = widths[0] if s == 0 else 0
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose3d(in_ch + extra, widths[s], stride, stride=stride),
                    _norm(widths[s]),
                    nn.SiLU(),
                    nn.Conv3d(widths[s], widths[s], 3, padding=1),
                    _norm(widths[s]),
                    nn.SiLU(),
                )
            )
            in_ch = widths[s]
        self.up_stages = nn.ModuleList(ups)

        self.stem = nn.Sequential(
            nn.Conv3d(1, widths[-1], 3, padding=1), _norm(widths[-1]), nn.SiLU()
        )
        self.head = _zero_init(nn.Conv3d(2 * widths[-1], 1, 3, padding=1))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        squeeze = v.dim() == 4  # (1, H, W, D) without batch, or (N, 1, H, W, D)
        if v.dim() == 3:
            v = v[None, None]
            squeeze = False
            unbatch_3d = True
        else:
            unbatch_3d = False
            if squeeze:
                v = v[None]
        if tuple(v.shape[2:]) != self.cfg.window_shape:
            raise ValueError(
                f"subvolume shape {tuple(v.shape[2:])} does not match configured "
                f"window {self.cfg.window_shape}"
            )

        gh, gw, gd = self.cfg.grid
        tokens = self.patch_embed(v).flatten(2).transpose(1, 2) + self.pos_embed
        skip_tokens = None
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i + 1 == self.skip_layer:
                skip_tokens = tokens
        tokens = self.final_norm(tokens)

        def to_grid(tok):
            return tok.transpose(1, 2).reshape(-1, self.cfg.embed_dim, gh, gw, gd)

        h = to_grid(tokens)
        skip = self.skip_proj(to_grid(skip_tokens))
        for s, stage in enumerate(self.up_stages):
            if s == 0:
                h = torch.cat([h, skip], dim=1)
            h = stage(h)

        correction = self.head(torch.cat([h, self.stem(v)], dim=1))
        out = torch.clamp(v + correction, 0.0, 1.0)
        if unbatch_3d:
            return out[0, 0]
        return out[0] if squeeze else out

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_mmg_model(cfg: MmgArchConfig, seed: int = 0) -> MmgModel:
    """Construct the slice model with reproducible parameter init."""
    torch.manual_seed(seed)
    return MmgModel(cfg)


def build_cen_model(cfg: CenArchConfig, seed: int = 0) -> CoherenceNet:
    torch.manual_seed(seed)
    return CoherenceNet(cfg)
