"""Run configuration: one JSON file (plus CLI overrides) drives every command.

The schema is the nested DEFAULTS dict below. Loading rejects unknown keys
at any level so typos fail loudly, and every command echoes the effective
merged config into its run directory.
"""

from __future__ import annotations

import json
from pathlib import Path

from .losses import LossWeights
from .networks import CenArchConfig, MmgArchConfig
from .phantom import PhantomSpec
from .preprocessing import PreprocessConfig
from .training import CenTrainConfig, MmgTrainConfig

__all__ = ["DEFAULTS", "ConfigError", "load_run_config", "apply_overrides"]


class ConfigError(ValueError):
    """A config file or override violates the schema."""


DEFAULTS: dict = {
    "seed": 0,
    "phantom": {
        "height": 64,
        "width": 64,
        "depth": 32,
        "num_regions": 5,
        "lesion_count": 1,
        "lesion_radius": 0.12,
        "noise_level": 0.02,
        "shading": 0.15,
    },
    "preprocess": {
        "clip_low_pct": 0.5,
        "clip_high_pct": 99.5,
        "trim_slices": 15,
    },
    "mmg_arch": {
        "num_blocks": 3,
        "residual_subblocks": 5,
        "base_channels": 64,
        "latent_channels": 0,
        "time_embedding_dim": 0,
        "image_size": [240, 240],
    },
    "cen_arch": {
        "window_shape": [240, 240, 16],
        "patch_size": [16, 16, 4],
        "embed_dim": 256,
        "depth": 8,
        "num_heads": 8,
        "mlp_ratio": 4,
    },
    "schedule": {
        "num_steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
    },
    "loss_weights": {
        "lambda1": 4.0,
        "lambda2": 2.0,
        "gamma1": 0.5,
        "gamma2": 0.1,
    },
    "train_mmg": {
        "epochs": 1600,
        "slices_per_epoch": 500,
        "batch_size": 4,
        "lr": 1e-4,
    },
    "train_cen": {
        "epochs": 250,
        "volumes_per_epoch": 100,
        "batch_size": 2,
        "lr": 1e-4,
    },
    "checkpoint_every": 50,
    "inference": {
        "t_test": 500,
        "single_step": False,
        "subvolume_factor": 10,
        "batch_size": 8,
    },
}


def _merge(defaults: dict, overrides: dict, path: str = "") -> dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            merged[key] = _merge(defaults[key], value, here)
        else:
            merged[key] = value
    return merged


def load_run_config(path: str | Path | None = None) -> dict:
    """DEFAULTS deep-merged with the given JSON file (if any)."""
    if path is None:
        return json.loads(json.dumps(DEFAULTS))
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return _merge(DEFAULTS, user)


def apply_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` CLI overrides (values parsed as JSON)."""
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not of the form key=value")
        dotted, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are allowed unquoted
        node: dict = {}
        leaf = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        config = _merge(config, node)
    return config


# -- typed views over the merged dict ---------------------------------------


def preprocess_config(cfg: dict) -> PreprocessConfig:
    return PreprocessConfig(**cfg["preprocess"])


def phantom_spec(cfg: dict, seed: int, case_id: str = "") -> PhantomSpec:
    return PhantomSpec(seed=seed, case_id=case_id, **cfg["phantom"])


def mmg_arch(cfg: dict) -> MmgArchConfig:
    d = dict(cfg["mmg_arch"])
    d["image_size"] = tuple(d["image_size"])
    return MmgArchConfig(**d)


def cen_arch(cfg: dict) -> CenArchConfig:
    d = dict(cfg["cen_arch"])
    d["window_shape"] = tuple(d["window_shape"])
    d["patch_size"] = tuple(d["patch_size"])
    return CenArchConfig(**d)


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**cfg["loss_weights"])


def mmg_train(cfg: dict) -> MmgTrainConfig:
    return MmgTrainConfig(**cfg["train_mmg"])


def cen_train(cfg: dict) -> CenTrainConfig:
    return CenTrainConfig(**cfg["train_cen"])
