"""Training loops for the slice model and the volumetric refiner, plus the
single-file checkpoint format shared by both.

Checkpoints are a JSON header (configs, counters, RNG states, tensor index)
followed by raw little-endian tensor blobs. Loading one rebuilds the model,
the optimizer and the samplers exactly, so a resumed run is bit-identical
to an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import MODALITY_ORDER, MultiModalVolume
from .diffusion import NoiseSchedule, build_linear_schedule
from .losses import CenLossValues, LossWeights, MmgLossValues, cen_total_loss, mmg_total_loss
from .networks import (
    CenArchConfig,
    CoherenceNet,
    MmgArchConfig,
    MmgModel,
    build_cen_model,
    build_mmg_model,
)
from .volumetric import plan_windows

__all__ = [
    "MmgTrainConfig",
    "CenTrainConfig",
    "TrainConfig",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "MmgTrainer",
    "CenTrainer",
    "TrainingDiverged",
]

GRAD_CLIP_NORM = 1.0


@dataclass(frozen=True)
class MmgTrainConfig:
    epochs: int = 1600
    slices_per_epoch: int = 500
    batch_size: int = 4
    lr: float = 1e-4

    def __post_init__(self):
        if min(self.epochs, self.slices_per_epoch, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("all training counts must be positive")


@dataclass(frozen=True)
class CenTrainConfig:
    epochs: int = 250
    volumes_per_epoch: int = 100
    batch_size: int = 2
    lr: float = 1e-4

    def __post_init__(self):
        if min(self.epochs, self.volumes_per_epoch, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("all training counts must be positive")


@dataclass(frozen=True)
class TrainConfig:
    mmg: MmgTrainConfig = field(default_factory=MmgTrainConfig)
    cen: CenTrainConfig = field(default_factory=CenTrainConfig)
    seed: int = 0
    checkpoint_every: int = 50  # epochs


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SLDMCKPT"
CKPT_FORMAT_VERSION = 1

_NP_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}
_TORCH_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
}


@dataclass
class Checkpoint:
    """In-memory form of a saved run: header metadata plus named tensors."""

    kind: str  # "mmg" or "cen"
    header: dict
    tensors: dict[str, torch.Tensor]

    @property
    def epoch(self) -> int:
        return self.header["epoch"]


def _tensor_blob(t: torch.Tensor) -> tuple[dict, bytes]:
    name = _TORCH_DTYPES.get(t.dtype)
    if name is None:
        raise ValueError(f"unsupported checkpoint tensor dtype {t.dtype}")
    arr = t.detach().cpu().numpy().astype(_NP_DTYPES[name], copy=False)
    blob = arr.tobytes(order="C")
    return {"dtype": name, "shape": list(t.shape), "nbytes": len(blob)}, blob


def save_checkpoint(path: str | Path, kind: str, header: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write the single-file archive: magic, JSON header, raw tensor blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        meta, blob = _tensor_blob(tensor)
        meta["offset"] = offset
        offset += meta["nbytes"]
        index[name] = meta
        blobs.append(blob)
    full_header = dict(header)
    full_header["format_version"] = CKPT_FORMAT_VERSION
    full_header["kind"] = kind
    full_header["tensors"] = index
    payload = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        version = header.get("format_version")
        if version != CKPT_FORMAT_VERSION:
            raise ValueError(
                f"{path}: checkpoint format version {version} is not supported "
                f"(expected {CKPT_FORMAT_VERSION})"
            )
        base = fh.tell()
        tensors = {}
        for name, meta in header.pop("tensors").items():
            fh.seek(base + meta["offset"])
            raw = fh.read(meta["nbytes"])
            arr = np.frombuffer(raw, dtype=_NP_DTYPES[meta["dtype"]]).reshape(meta["shape"])
            tensors[name] = torch.from_numpy(arr.copy())
    return Checkpoint(kind=header["kind"], header=header, tensors=tensors)


def _optimizer_tensors(optimizer: torch.optim.Adam, named: list[str]) -> dict[str, torch.Tensor]:
    """Flatten Adam state into blob-able tensors keyed by parameter name."""
    out: dict[str, torch.Tensor] = {}
    state = optimizer.state_dict()["state"]
    for idx, pname in enumerate(named):
        if idx not in state:
            continue
        for key, value in state[idx].items():
            if torch.is_tensor(value):
                out[f"opt.{pname}.{key}"] = value
            else:
                out[f"opt.{pname}.{key}"] = torch.tensor(float(value), dtype=torch.float64)
    return out


def _restore_optimizer(
    optimizer: torch.optim.Adam, named: list[str], tensors: dict[str, torch.Tensor]
) -> None:
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for idx, pname in enumerate(named):
        entries = {}
        prefix = f"opt.{pname}."
        for full, tensor in tensors.items():
            if full.startswith(prefix):
                key = full[len(prefix):]
                entries[key] = tensor.clone()
        if entries:
            state[idx] = entries
    sd["state"] = state
    optimizer.load_state_dict(sd)


def _rng_header(np_rng: np.random.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state}


def _rng_tensors(torch_gen: torch.Generator) -> dict[str, torch.Tensor]:
    return {"rng.torch": torch_gen.get_state()}


def _restore_rngs(header: dict, tensors: dict, np_rng: np.random.Generator, torch_gen: torch.Generator):
    np_rng.bit_generator.state = header["rng"]["numpy"]
    torch_gen.set_state(tensors["rng.torch"].to(torch.uint8))


# ---------------------------------------------------------------------------
# MMG training
# ---------------------------------------------------------------------------


class CsvLog:
    """Append-only per-step loss log."""

    def __init__(self, path: str | Path, columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(columns)

    def write(self, row: list) -> None:
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class MmgTrainer:
    """Slice-level trainer: sample slices, mask a modality, optimize jointly.

    Each drawn sample picks a case, an axial slice and a masked modality
    uniformly at random (with replacement) from the training pool; the step
    corrupts the encoded latent at a uniformly drawn time step and trains
    encoder, denoiser and all four decoders end to end.
    """

    def __init__(
        self,
        cases: list[MultiModalVolume],
        arch: MmgArchConfig,
        sched: NoiseSchedule | None = None,
        weights: LossWeights | None = None,
        cfg: MmgTrainConfig | None = None,
        seed: int = 0,
        device: str = "cpu",
        log: CsvLog | None = None,
    ):
        if not cases:
            raise ValueError("no training cases provided")
        self.arch = arch
        self.sched = sched or build_linear_schedule()
        self.weights = weights or LossWeights()
        self.cfg = cfg or MmgTrainConfig()
        self.device = device
        self.seed = seed
        self.log = log

        self.model = build_mmg_model(arch, seed=seed).to(device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr)
        self._param_names = [n for n, _ in self.model.named_parameters()]

        self.np_rng = np.random.default_rng(seed)
        self.torch_gen = torch.Generator(device="cpu").manual_seed(seed + 1)

        self.step_count = 0
        self.epoch = 0
        self._bind_cases(cases)

    def _bind_cases(self, cases: list[MultiModalVolume]) -> None:
        self.cases = cases
        self._stacks = [c.stacked().astype(np.float32) for c in cases]
        self._masks = [
            c.seg_mask.astype(np.float32)
            if c.seg_mask is not None
            else np.zeros(c.shape, dtype=np.float32)
            for c in cases
        ]
        h, w = cases[0].shape[:2]
        if (h, w) != self.arch.image_size:
            raise ValueError(
                f"cases are {h}x{w} in-plane but the model expects {self.arch.image_size}"
            )

    def draw_indices(self, n: int) -> list[tuple[int, int, int]]:
        """n uniform (case, slice, masked channel) draws with replacement."""
        out = []
        for _ in range(n):
            ci = int(self.np_rng.integers(len(self.cases)))
            f = int(self.np_rng.integers(self._stacks[ci].shape[3]))
            missing = int(self.np_rng.integers(len(MODALITY_ORDER)))
            out.append((ci, f, missing))
        return out

    def draw_batch(self, size: int | None = None):
        """One uniformly-drawn training batch (inputs, targets, lesion masks)."""
        size = size or self.cfg.batch_size
        xs, targets, segs = [], [], []
        for ci, f, missing in self.draw_indices(size):
            target = self._stacks[ci][:, :, :, f]
            x = target.copy()
            x[missing] = 0.0
            xs.append(x)
            targets.append(target)
            segs.append(self._masks[ci][:, :, f])
        to = lambda a: torch.from_numpy(np.stack(a)).to(self.device)
        return to(xs), to(targets), to(segs)

    def step(self, batch=None) -> MmgLossValues:
        """One optimizer update; returns the logged loss components."""
        x, target, seg = batch if batch is not None else self.draw_batch()
        n = x.shape[0]
        t = self.np_rng.integers(1, self.sched.num_steps + 1, size=n)
        abar = (
            self.sched.alpha_bar[torch.from_numpy(t) - 1].float().view(n, 1, 1, 1).to(self.device)
        )

        self.model.train()
        z = self.model.encode(x)
        eps = torch.randn(z.shape, generator=self.torch_gen, dtype=z.dtype).to(self.device)
        zt = torch.sqrt(abar) * z + torch.sqrt(1.0 - abar) * eps
        eps_hat = self.model.denoise_eps(zt, torch.from_numpy(t).to(self.device))
        z_tilde = (zt - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)
        x_hat = self.model.decode_all(z_tilde)

        values = mmg_total_loss(x_hat, target, seg, z_tilde, z, self.weights)
        if not torch.isfinite(values.total):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step_count}: t={t.tolist()}, "
                f"rec={float(values.rec_img)}, latent={float(values.latent)}, "
                f"ssim={float(values.ssim)}"
            )
        self.optimizer.zero_grad()
        values.total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), GRAD_CLIP_NORM)
        self.optimizer.step()
        self.step_count += 1
        if self.log is not None:
            self.log.write(
                [
                    self.step_count,
                    f"{float(values.rec_img):.6g}",
                    f"{float(values.latent):.6g}",
                    f"{float(values.ssim):.6g}",
                    f"{float(values.total):.6g}",
                ]
            )
        return values

    def run_epoch(self) -> float:
        """slices_per_epoch draws in batch_size chunks; returns mean total loss."""
        steps = max(1, self.cfg.slices_per_epoch // self.cfg.batch_size)
        total = 0.0
        for _ in range(steps):
            total += float(self.step().total)
        self.epoch += 1
        return total / steps

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        header = {
            "arch": self.arch.to_dict(),
            "schedule": self.sched.to_dict(),
            "loss_weights": self.weights.to_dict(),
            "train": {
                "epochs": self.cfg.epochs,
                "slices_per_epoch": self.cfg.slices_per_epoch,
                "batch_size": self.cfg.batch_size,
                "lr": self.cfg.lr,
            },
            "seed": self.seed,
            "epoch": self.epoch,
            "step_count": self.step_count,
            "rng": _rng_header(self.np_rng),
        }
        tensors: dict[str, torch.Tensor] = {}
        for name, value in self.model.state_dict().items():
            tensors[f"model.{name}"] = value
        tensors.update(_optimizer_tensors(self.optimizer, self._param_names))
        tensors.update(_rng_tensors(self.torch_gen))
        save_checkpoint(path, "mmg", header, tensors)

    @classmethod
    def from_checkpoint(
        cls,
        path: str | Path,
        cases: list[MultiModalVolume],
        device: str = "cpu",
        log: CsvLog | None = None,
    ) -> "MmgTrainer":
        ckpt = load_checkpoint(path)
        if ckpt.kind != "mmg":
            raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, expected 'mmg'")
        h = ckpt.header
        trainer = cls(
            cases,
            MmgArchConfig.from_dict(h["arch"]),
            NoiseSchedule.from_dict(h["schedule"]),
            LossWeights.from_dict(h["loss_weights"]),
            MmgTrainConfig(**h["train"]),
            seed=h["seed"],
            device=device,
            log=log,
        )
        trainer.model.load_state_dict(
            {k[len("model.") :]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
        )
        _restore_optimizer(trainer.optimizer, trainer._param_names, ckpt.tensors)
        _restore_rngs(h, ckpt.tensors, trainer.np_rng, trainer.torch_gen)
        trainer.epoch = h["epoch"]
        trainer.step_count = h["step_count"]
        return trainer


def load_mmg_model(path: str | Path, device: str = "cpu"):
    """Inference-side loader: returns (model, schedule, loss weights, header)."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "mmg":
        raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, expected 'mmg'")
    arch = MmgArchConfig.from_dict(ckpt.header["arch"])
    model = MmgModel(arch).to(device)
    model.load_state_dict(
        {k[len("model.") :]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    )
    model.eval()
    sched = NoiseSchedule.from_dict(ckpt.header["schedule"])
    weights = LossWeights.from_dict(ckpt.header["loss_weights"])
    return model, sched, weights, ckpt.header


# ---------------------------------------------------------------------------
# CEn training
# ---------------------------------------------------------------------------


class CenTrainer:
    """Subvolume-level trainer for the coherence refiner.

    Consumes (input, target) full-volume pairs; the input side is whatever
    degraded volume the refiner should clean up (synthesized volumes in the
    real pipeline). Windows are drawn uniformly from the sliding-window
    starts of each pair.
    """

    def __init__(
        self,
        pairs: list[tuple[np.ndarray, np.ndarray]],
        arch: CenArchConfig,
        gamma2: float = 0.1,
        cfg: CenTrainConfig | None = None,
        subvolume_factor: int = 10,
        seed: int = 0,
        device: str = "cpu",
        log: CsvLog | None = None,
    ):
        if not pairs:
            raise ValueError("no training pairs provided")
        for inp, tgt in pairs:
            if inp.shape != tgt.shape:
                raise ValueError(f"pair shapes disagree: {inp.shape} vs {tgt.shape}")
            if inp.shape[:2] != arch.window_shape[:2]:
                raise ValueError(
                    f"pair in-plane shape {inp.shape[:2]} does not match window "
                    f"{arch.window_shape[:2]}"
                )
        self.pairs = pairs
        self.arch = arch
        self.gamma2 = gamma2
        self.cfg = cfg or CenTrainConfig()
        self.subvolume_factor = subvolume_factor
        self.seed = seed
        self.device = device
        self.log = log

        self.model = build_cen_model(arch, seed=seed).to(device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr)
        self._param_names = [n for n, _ in self.model.named_parameters()]
        self.np_rng = np.random.default_rng(seed)

        self._plans = [
            plan_windows(inp.shape[2], s=subvolume_factor, window_depth=arch.window_shape[2])
            for inp, _ in pairs
        ]
        self.step_count = 0
        self.epoch = 0

    def draw_batch(self, size: int | None = None):
        size = size or self.cfg.batch_size
        ins, tgts = [], []
        for _ in range(size):
            pi = int(self.np_rng.integers(len(self.pairs)))
            plan = self._plans[pi]
            start = plan.starts[int(self.np_rng.integers(plan.num_windows))]
            sl = slice(start, start + plan.window_depth)
            ins.append(self.pairs[pi][0][:, :, sl])
            tgts.append(self.pairs[pi][1][:, :, sl])
        to = lambda a: torch.from_numpy(np.stack(a)).float().to(self.device)
        return to(ins), to(tgts)

    def step(self, batch=None) -> CenLossValues:
        vin, vtgt = batch if batch is not None else self.draw_batch()
        self.model.train()
        refined = self.model(vin.unsqueeze(1))[:, 0]
        values = cen_total_loss(refined, vtgt, self.gamma2)
        if not torch.isfinite(values.total):
            raise TrainingDiverged(
                f"non-finite refiner loss at step {self.step_count}: "
                f"rec={float(values.rec)}, ssim={float(values.ssim)}"
            )
        self.optimizer.zero_grad()
        values.total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), GRAD_CLIP_NORM)
        self.optimizer.step()
        self.step_count += 1
        if self.log is not None:
            self.log.write(
                [
                    self.step_count,
                    f"{float(values.rec):.6g}",
                    f"{float(values.ssim):.6g}",
                    f"{float(values.total):.6g}",
                ]
            )
        return values

    def run_epoch(self) -> float:
        steps = max(1, self.cfg.volumes_per_epoch // self.cfg.batch_size)
        total = 0.0
        for _ in range(steps):
            total += float(self.step().total)
        self.epoch += 1
        return total / steps

    def save(self, path: str | Path) -> None:
        header = {
            "arch": self.arch.to_dict(),
            "gamma2": self.gamma2,
            "subvolume_factor": self.subvolume_factor,
            "train": {
                "epochs": self.cfg.epochs,
                "volumes_per_epoch": self.cfg.volumes_per_epoch,
                "batch_size": self.cfg.batch_size,
                "lr": self.cfg.lr,
            },
            "seed": self.seed,
            "epoch": self.epoch,
            "step_count": self.step_count,
            "rng": {"numpy": self.np_rng.bit_generator.state},
        }
        tensors: dict[str, torch.Tensor] = {}
        for name, value in self.model.state_dict().items():
            tensors[f"model.{name}"] = value
        tensors.update(_optimizer_tensors(self.optimizer, self._param_names))
        save_checkpoint(path, "cen", header, tensors)

    @classmethod
    def from_checkpoint(
        cls,
        path: str | Path,
        pairs: list[tuple[np.ndarray, np.ndarray]],
        device: str = "cpu",
        log: CsvLog | None = None,
    ) -> "CenTrainer":
        ckpt = load_checkpoint(path)
        if ckpt.kind != "cen":
            raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, expected 'cen'")
        h = ckpt.header
        trainer = cls(
            pairs,
            CenArchConfig.from_dict(h["arch"]),
            gamma2=h["gamma2"],
            cfg=CenTrainConfig(**h["train"]),
            subvolume_factor=h["subvolume_factor"],
            seed=h["seed"],
            device=device,
            log=log,
        )
        trainer.model.load_state_dict(
            {k[len("model.") :]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
        )
        _restore_optimizer(trainer.optimizer, trainer._param_names, ckpt.tensors)
        trainer.np_rng.bit_generator.state = h["rng"]["numpy"]
        trainer.epoch = h["epoch"]
        trainer.step_count = h["step_count"]
        return trainer


def load_cen_model(path: str | Path, device: str = "cpu"):
    """Inference-side loader: returns (model, header)."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "cen":
        raise ValueError(f"{path} holds a {ckpt.kind!r} checkpoint, expected 'cen'")
    arch = CenArchConfig.from_dict(ckpt.header["arch"])
    model = CoherenceNet(arch).to(device)
    model.load_state_dict(
        {k[len("model.") :]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    )
    model.eval()
    return model, ckpt.header
