"""Command-line entry point: one binary, one subcommand per pipeline stage.

Every invocation materializes a run directory (under $SLAMDIMM_RUNS, or
./runs) holding the effective config, a version string, the seeds, logs and
all artifacts the command produced. Existing non-empty run directories are
never overwritten unless --force is given.

Exit codes: 0 success, 1 unexpected failure, 2 config violation,
3 missing file, 4 checkpoint/data shape mismatch. Failures print a single
machine-readable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .core import MODALITY_ORDER, ModalityId, Volume, validate_case
from .dataio import (
    cases_for_split,
    load_case,
    read_manifest,
    read_nifti,
    save_case,
    write_manifest,
    write_nifti,
)
from .evaluation import (
    difference_map_triplet,
    evaluate_case,
    reports_to_csv,
)
from .figures import save_case_panel, save_loss_curves
from .inference import masked_input_stack, synthesize_missing_volume
from .phantom import generate_phantom_case
from .preprocessing import applied_parameters, preprocess_case
from .training import (
    CenTrainer,
    CsvLog,
    MmgTrainer,
    load_cen_model,
    load_mmg_model,
)
from .volumetric import refine_volume

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_SHAPE = 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def version_string() -> str:
    v = f"slamdimm {__version__}"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).resolve().parent,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            v += f" ({out.stdout.strip()})"
    except OSError:
        pass
    return v


def prepare_run_dir(args, command: str, cfg: dict) -> Path:
    root = Path(os.environ.get("SLAMDIMM_RUNS", "runs"))
    name = args.run_name or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = root / name
    if run_dir.exists() and any(run_dir.iterdir()):
        if not args.force:
            raise CliError(
                EXIT_CONFIG,
                "run-dir-exists",
                f"run directory {run_dir} already exists; pass --force to replace it",
            )
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "argv": sys.argv[1:], "config": cfg}
    (run_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
    (run_dir / "version.txt").write_text(version_string() + "\n")
    (run_dir / "seeds.json").write_text(json.dumps({"seed": cfg["seed"]}) + "\n")
    return run_dir


def _resolve_device(name: str) -> str:
    if name == "cpu":
        return "cpu"
    if name == "accelerator":
        if torch.cuda.is_available():
            return "cuda"
        raise CliError(EXIT_CONFIG, "no-accelerator", "accelerator requested but none is available")
    raise CliError(EXIT_CONFIG, "bad-device", f"unknown device {name!r}")


def _require_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_MISSING_FILE, "missing-file", f"{what} not found: {path}")
    return path


def _load_dataset(data_dir: str, split: str | None):
    root = _require_file(data_dir, "dataset directory")
    manifest = read_manifest(root)
    entries = cases_for_split(manifest, split)
    if not entries:
        raise CliError(
            EXIT_CONFIG, "empty-split", f"no cases tagged split={split!r} in {root}"
        )
    return root, manifest, entries


def _check_inplane(case_shape, expected, what: str):
    if tuple(case_shape[:2]) != tuple(expected):
        raise CliError(
            EXIT_SHAPE,
            "shape-mismatch",
            f"case is {case_shape[0]}x{case_shape[1]} in-plane but {what} expects "
            f"{expected[0]}x{expected[1]}",
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_phantom(args, cfg: dict) -> int:
    run_dir = prepare_run_dir(args, "phantom", cfg)
    out_dir = Path(args.out) if args.out else run_dir / "dataset"
    entries = []
    for i in range(args.cases):
        spec = cfgmod.phantom_spec(cfg, seed=cfg["seed"] + i, case_id=f"phantom_{i:03d}")
        case = generate_phantom_case(spec)
        entry = save_case(case, out_dir)
        entry["split"] = "val" if i >= args.cases - args.val_cases else "train"
        entries.append(entry)
        print(f"wrote {entry['case_id']} ({entry['split']})")
    write_manifest(out_dir, entries, preprocessing=None)
    print(f"dataset: {out_dir} ({args.cases} cases, {args.val_cases} val)")
    return EXIT_OK


def _preprocess_one(entry: dict, in_root: str, out_root: str, cfg: dict) -> dict:
    case = load_case(entry, in_root)
    processed = preprocess_case(case, cfgmod.preprocess_config(cfg))
    new_entry = save_case(processed, out_root)
    new_entry["split"] = entry.get("split", "train")
    return new_entry


def cmd_preprocess(args, cfg: dict) -> int:
    run_dir = prepare_run_dir(args, "preprocess", cfg)
    in_root, _, entries = _load_dataset(args.data, None)
    out_dir = Path(args.out) if args.out else run_dir / "dataset"
    if args.workers > 0:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            new_entries = list(
                pool.map(
                    _preprocess_one,
                    entries,
                    [str(in_root)] * len(entries),
                    [str(out_dir)] * len(entries),
                    [cfg] * len(entries),
                )
            )
    else:
        new_entries = [_preprocess_one(e, str(in_root), str(out_dir), cfg) for e in entries]
    write_manifest(out_dir, new_entries, preprocessing=applied_parameters(cfgmod.preprocess_config(cfg)))
    print(f"preprocessed {len(new_entries)} cases -> {out_dir}")
    return EXIT_OK


def _quick_val_ssim(trainer: MmgTrainer, val_cases, t_test: int, device: str) -> float:
    """Cheap validation proxy: single-step refinement, rotating missing modality."""
    from .evaluation import ssim_3d

    scores = []
    for i, case in enumerate(val_cases):
        missing = MODALITY_ORDER[i % len(MODALITY_ORDER)]
        rng = torch.Generator(device="cpu").manual_seed(trainer.seed + 7919)
        vol = synthesize_missing_volume(
            case, missing, trainer.model, trainer.sched,
            t_test=t_test, rng=rng, single_step=True, batch_size=16, device=device,
        )
        scores.append(ssim_3d(vol, case.volumes[missing]))
    return float(np.mean(scores))


def cmd_train_mmg(args, cfg: dict) -> int:
    device = _resolve_device(args.device)
    run_dir = prepare_run_dir(args, "train-mmg", cfg)
    _, _, train_entries = _load_dataset(args.data, "train")
    root = Path(args.data)
    train_cases = [load_case(e, root) for e in train_entries]
    try:
        val_cases = [load_case(e, root) for e in cases_for_split(read_manifest(root), "val")]
    except Exception:
        val_cases = []

    arch = cfgmod.mmg_arch(cfg)
    _check_inplane(train_cases[0].shape, arch.image_size, "mmg_arch.image_size")
    log = CsvLog(run_dir / "mmg_train_log.csv", ["step", "L_rec_img", "L_latent", "L_SSIM", "total"])

    from .diffusion import build_linear_schedule

    sched = build_linear_schedule(**cfg["schedule"])
    if args.resume:
        trainer = MmgTrainer.from_checkpoint(
            _require_file(args.resume, "checkpoint"), train_cases, device=device, log=log
        )
    else:
        trainer = MmgTrainer(
            train_cases,
            arch,
            sched,
            cfgmod.loss_weights(cfg),
            cfgmod.mmg_train(cfg),
            seed=cfg["seed"],
            device=device,
            log=log,
        )

    epochs = args.epochs if args.epochs is not None else trainer.cfg.epochs
    best_ssim = -2.0
    t_test = cfg["inference"]["t_test"]
    for _ in range(epochs):
        mean_loss = trainer.run_epoch()
        print(f"epoch {trainer.epoch}: mean loss {mean_loss:.6g}")
        at_interval = trainer.epoch % cfg["checkpoint_every"] == 0
        if at_interval or trainer.epoch == epochs:
            trainer.save(run_dir / "mmg_last.ckpt")
            if val_cases:
                score = _quick_val_ssim(trainer, val_cases, t_test, device)
                print(f"epoch {trainer.epoch}: val ssim {score:.4f}")
                if score > best_ssim:
                    best_ssim = score
                    trainer.save(run_dir / "mmg_best.ckpt")
    trainer.save(run_dir / "mmg.ckpt")
    log.close()
    save_loss_curves(run_dir / "mmg_train_log.csv", run_dir / "mmg_train_loss.png", "slice model training")
    print(f"checkpoint: {run_dir / 'mmg.ckpt'}")
    return EXIT_OK


def build_cen_pairs(cases, model, sched, t_test, seed, device="cpu", single_step=False):
    """(synthesized, ground truth) volume pairs for refiner training.

    For each case the masked modality is drawn once, matching the condition
    the refiner sees at inference: it cleans up volumes the slice model
    produced for a modality it never observed.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for case in cases:
        missing = MODALITY_ORDER[int(rng.integers(len(MODALITY_ORDER)))]
        gen = torch.Generator(device="cpu").manual_seed(int(rng.integers(2**31)))
        synth = synthesize_missing_volume(
            case, missing, model, sched, t_test=t_test, rng=gen,
            single_step=single_step, batch_size=16, device=device,
        )
        pairs.append((synth.data, case.volumes[missing].data.astype(np.float32)))
    return pairs


def cmd_train_cen(args, cfg: dict) -> int:
    device = _resolve_device(args.device)
    run_dir = prepare_run_dir(args, "train-cen", cfg)
    _, _, train_entries = _load_dataset(args.data, "train")
    root = Path(args.data)
    train_cases = [load_case(e, root) for e in train_entries]

    model, sched, _, _ = load_mmg_model(_require_file(args.mmg_checkpoint, "checkpoint"), device)
    _check_inplane(train_cases[0].shape, model.cfg.image_size, "the checkpoint")
    arch = cfgmod.cen_arch(cfg)
    _check_inplane(train_cases[0].shape, arch.window_shape[:2], "cen_arch.window_shape")

    inference_cfg = cfg["inference"]
    print("building refiner training pairs (slice-model inference per case)...")
    pairs = build_cen_pairs(
        train_cases, model, sched, inference_cfg["t_test"], cfg["seed"], device,
        single_step=inference_cfg["single_step"],
    )
    log = CsvLog(run_dir / "cen_train_log.csv", ["step", "L_rec_3d", "L_ssim_3d", "total"])
    trainer = CenTrainer(
        pairs,
        arch,
        gamma2=cfg["loss_weights"]["gamma2"],
        cfg=cfgmod.cen_train(cfg),
        subvolume_factor=inference_cfg["subvolume_factor"],
        seed=cfg["seed"],
        device=device,
        log=log,
    )
    epochs = args.epochs if args.epochs is not None else trainer.cfg.epochs
    for _ in range(epochs):
        mean_loss = trainer.run_epoch()
        print(f"epoch {trainer.epoch}: mean loss {mean_loss:.6g}")
        if trainer.epoch % cfg["checkpoint_every"] == 0:
            trainer.save(run_dir / "cen_last.ckpt")
    trainer.save(run_dir / "cen.ckpt")
    log.close()
    save_loss_curves(run_dir / "cen_train_log.csv", run_dir / "cen_train_loss.png", "refiner training")
    print(f"checkpoint: {run_dir / 'cen.ckpt'}")
    return EXIT_OK


def cmd_synthesize(args, cfg: dict) -> int:
    device = _resolve_device(args.device)
    run_dir = prepare_run_dir(args, "synthesize", cfg)
    root, _, entries = _load_dataset(args.data, args.split)
    if args.case:
        entries = [e for e in entries if e["case_id"] in set(args.case.split(","))]
        if not entries:
            raise CliError(EXIT_CONFIG, "unknown-case", f"no case matches {args.case!r}")
    model, sched, _, _ = load_mmg_model(_require_file(args.checkpoint, "checkpoint"), device)
    missing = ModalityId.from_string(args.missing)
    inference_cfg = cfg["inference"]

    for entry in entries:
        case = load_case(entry, root)
        _check_inplane(case.shape, model.cfg.image_size, "the checkpoint")
        if args.dump_masked_input:
            stack = masked_input_stack(case, missing)
            np.save(run_dir / f"{case.case_id}_{missing.value}_masked_input.npy", stack)
        rng = torch.Generator(device="cpu").manual_seed(cfg["seed"])
        vol = synthesize_missing_volume(
            case, missing, model, sched,
            t_test=inference_cfg["t_test"], rng=rng,
            single_step=inference_cfg["single_step"],
            batch_size=inference_cfg["batch_size"], device=device,
        )
        out = run_dir / f"{case.case_id}_{missing.value}_mmg.nii.gz"
        write_nifti(out, vol.data, vol.spacing, vol.affine)
        print(f"synthesized {out}")
    return EXIT_OK


def cmd_refine(args, cfg: dict) -> int:
    device = _resolve_device(args.device)
    run_dir = prepare_run_dir(args, "refine", cfg)
    model, _ = load_cen_model(_require_file(args.checkpoint, "checkpoint"), device)
    data, spacing, affine = read_nifti(_require_file(args.volume, "volume"))
    _check_inplane(data.shape, model.cfg.window_shape[:2], "the refiner checkpoint")
    refined = refine_volume(
        data, model, s=cfg["inference"]["subvolume_factor"], device=device
    )
    stem = Path(args.volume).name.replace(".nii.gz", "").replace(".nii", "")
    out = run_dir / f"{stem}_cen.nii.gz"
    write_nifti(out, refined, spacing, affine)
    print(f"refined {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: dict) -> int:
    device = _resolve_device(args.device)
    run_dir = prepare_run_dir(args, "evaluate", cfg)
    root, _, entries = _load_dataset(args.data, args.split)
    if args.case:
        wanted = set(args.case.split(","))
        entries = [e for e in entries if e["case_id"] in wanted]
        if not entries:
            raise CliError(EXIT_CONFIG, "unknown-case", f"no case matches {args.case!r}")

    mmg_model, sched, _, _ = load_mmg_model(_require_file(args.mmg_checkpoint, "checkpoint"), device)
    cen_model = None
    if args.cen_checkpoint:
        cen_model, _ = load_cen_model(_require_file(args.cen_checkpoint, "checkpoint"), device)

    inference_cfg = cfg["inference"]
    rng = np.random.default_rng(cfg["seed"])
    reports = []
    reports_dir = run_dir / "reports"
    figures_dir = run_dir / "figures"
    for entry in entries:
        case = load_case(entry, root)
        _check_inplane(case.shape, mmg_model.cfg.image_size, "the checkpoint")
        if args.missing == "random":
            missing = MODALITY_ORDER[int(rng.integers(len(MODALITY_ORDER)))]
        else:
            missing = ModalityId.from_string(args.missing)
        report, v_mmg, v_cen = evaluate_case(
            case, missing, mmg_model, sched,
            cen_model=cen_model,
            t_test=inference_cfg["t_test"],
            single_step=inference_cfg["single_step"],
            seed=cfg["seed"],
            subvolume_factor=inference_cfg["subvolume_factor"],
            device=device,
        )
        reports.append(report)
        reports_dir.mkdir(parents=True, exist_ok=True)
        (reports_dir / f"{case.case_id}_{missing.value}.json").write_text(report.to_json())
        gt = case.volumes[missing]
        difference_map_triplet(gt, v_mmg, v_cen, figures_dir, case.case_id, missing.value)
        save_case_panel(case, missing, v_mmg, v_cen, figures_dir / f"{case.case_id}_{missing.value}_panel.png")
        cen_note = "" if report.ssim_cen is None else f", cen {report.ssim_cen:.4f}"
        print(f"{case.case_id} missing={missing.value}: ssim mmg {report.ssim_mmg:.4f}{cen_note}")
    csv_path = reports_to_csv(reports, run_dir / "evaluation.csv")
    print(f"evaluation table: {csv_path}")
    return EXIT_OK


def cmd_plot_diff(args, cfg: dict) -> int:
    run_dir = prepare_run_dir(args, "plot-diff", cfg)
    a, _, _ = read_nifti(_require_file(args.original, "volume"))
    b, _, _ = read_nifti(_require_file(args.generated, "volume"))
    c = None
    if args.refined:
        c, _, _ = read_nifti(_require_file(args.refined, "volume"))
    if a.shape != b.shape or (c is not None and c.shape != a.shape):
        raise CliError(EXIT_SHAPE, "shape-mismatch", "difference-map volumes must share a shape")
    written = difference_map_triplet(a, b, c, run_dir, args.case_id, args.modality)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slamdimm",
        description="Missing-modality MRI synthesis: phantom data, training, inference, evaluation.",
    )
    parser.add_argument("--version", action="version", version=version_string())

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="root random seed (overrides config)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config entry, e.g. --set mmg_arch.base_channels=16",
    )
    common.add_argument("--run-name", help="run directory name under $SLAMDIMM_RUNS (default: timestamped)")
    common.add_argument("--force", action="store_true", help="replace an existing run directory")
    common.add_argument("--workers", type=int, default=0, help="parallel workers where supported")
    common.add_argument("--device", choices=["cpu", "accelerator"], default="cpu")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--val-cases", type=int, default=1)
    p.add_argument("--out", help="dataset directory (default: <run dir>/dataset)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", parents=[common], help="clip, trim and normalize a dataset")
    p.add_argument("--data", required=True, help="input dataset directory (with manifest.json)")
    p.add_argument("--out", help="output dataset directory (default: <run dir>/dataset)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-mmg", parents=[common], help="train the slice synthesis model")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--resume", help="resume from a checkpoint")
    p.set_defaults(func=cmd_train_mmg)

    p = sub.add_parser("train-cen", parents=[common], help="train the volumetric refiner")
    p.add_argument("--data", required=True)
    p.add_argument("--mmg-checkpoint", required=True)
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.set_defaults(func=cmd_train_cen)

    p = sub.add_parser("synthesize", parents=[common], help="synthesize a missing modality per case")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--missing", required=True, choices=[m.value for m in MODALITY_ORDER])
    p.add_argument("--split", default="val")
    p.add_argument("--case", help="comma-separated case ids (default: whole split)")
    p.add_argument("--dump-masked-input", action="store_true",
                   help="also write the zero-masked network input as .npy")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("refine", parents=[common], help="run the refiner over a synthesized volume")
    p.add_argument("--volume", required=True, help="input .nii.gz (e.g. a synthesize output)")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", parents=[common], help="score synthesis against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--mmg-checkpoint", required=True)
    p.add_argument("--cen-checkpoint")
    p.add_argument("--split", default="val")
    p.add_argument("--case", help="comma-separated case ids (default: whole split)")
    p.add_argument("--missing", default="random",
                   choices=["random"] + [m.value for m in MODALITY_ORDER])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot-diff", parents=[common], help="difference maps between volumes")
    p.add_argument("--original", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--refined", help="optional third volume for the full triplet")
    p.add_argument("--case-id", default="case")
    p.add_argument("--modality", default="volume")
    p.set_defaults(func=cmd_plot_diff)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_run_config(args.config)
        cfg = cfgmod.apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return args.func(args, cfg)
    except CliError as e:
        return _fail(e.code, e.kind, str(e))
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config-violation", str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, "missing-file", str(e))
    except ValueError as e:
        return _fail(EXIT_CONFIG, "invalid-value", str(e))
    except Exception as e:  # noqa: BLE001 - last-resort CLI boundary
        return _fail(EXIT_FAILURE, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
