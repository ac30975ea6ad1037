"""Matplotlib report figures rendered alongside the CSV outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import ModalityId, MultiModalVolume, Volume

__all__ = ["save_loss_curves", "save_case_panel"]


def save_loss_curves(log_csv: str | Path, out_png: str | Path, title: str = "training loss") -> Path:
    """Plot every numeric column of a per-step training log against step."""
    log_csv = Path(log_csv)
    with open(log_csv) as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [list(map(float, row)) for row in reader if row]
    if not rows:
        raise ValueError(f"{log_csv} holds no training steps")
    data = np.array(rows)
    steps = data[:, 0]

    fig, ax = plt.subplots(figsize=(7, 4.2))
    for i, name in enumerate(columns[1:], start=1):
        ax.plot(steps, data[:, i], label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def save_case_panel(
    case: MultiModalVolume,
    missing: ModalityId,
    v_mmg: Volume,
    v_cen: Volume | None,
    out_png: str | Path,
) -> Path:
    """Mid-slice comparison panel: ground truth, synthesis, refinement, residuals."""
    gt = case.volumes[missing].data
    f = gt.shape[2] // 2
    panels = [("original", gt[:, :, f]), ("synthesized", v_mmg.data[:, :, f])]
    if v_cen is not None:
        panels.append(("refined", v_cen.data[:, :, f]))
    panels.append(("|orig - synth|", np.abs(gt[:, :, f] - v_mmg.data[:, :, f])))
    if v_cen is not None:
        panels.append(("|orig - refined|", np.abs(gt[:, :, f] - v_cen.data[:, :, f])))

    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 3.0))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        vmax = 0.5 if name.startswith("|") else 1.0
        ax.imshow(img.T, cmap="gray", vmin=0.0, vmax=vmax, origin="lower")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.suptitle(f"{case.case_id}: missing {missing.value} (axial slice {f + 1})", fontsize=10)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png
