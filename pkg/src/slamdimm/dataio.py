"""Volume and dataset I/O: gzipped NIfTI-1 files plus JSON case manifests.

The NIfTI-1 support here is deliberately small: single-file .nii / .nii.gz,
scalar 3D images, sform affine and pixdim spacing round-tripped verbatim.
That is everything the pipeline reads or writes; no external imaging
library is required.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import MODALITY_ORDER, MultiModalVolume, Volume

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# NIfTI datatype codes we understand.
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def _open_maybe_gzip(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """Read a 3D NIfTI-1 image; returns (data, spacing, affine).

    Data comes back as float32 in (H, W, D) order with any scl_slope /
    scl_inter scaling applied.
    """
    path = Path(path)
    with _open_maybe_gzip(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise ValueError(f"{path}: truncated NIfTI header")
        (sizeof_hdr,) = struct.unpack_from("<i", header, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise ValueError(f"{path}: not a little-endian NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
        magic = header[344:348]
        if magic not in (MAGIC_SINGLE, b"ni1\x00"):
            raise ValueError(f"{path}: bad NIfTI magic {magic!r}")

        dim = struct.unpack_from("<8h", header, 40)
        ndim = dim[0]
        if ndim < 3 or any(d > 1 for d in dim[4 : 1 + ndim]):
            raise ValueError(f"{path}: only scalar 3D images supported, dim={dim}")
        shape = tuple(int(d) for d in dim[1:4])

        (datatype, bitpix) = struct.unpack_from("<2h", header, 70)
        if datatype not in _DTYPES:
            raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
        dtype = _DTYPES[datatype]
        if bitpix != dtype.itemsize * 8:
            raise ValueError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

        pixdim = struct.unpack_from("<8f", header, 76)
        spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])

        (vox_offset,) = struct.unpack_from("<f", header, 108)
        (scl_slope,) = struct.unpack_from("<f", header, 112)
        (scl_inter,) = struct.unpack_from("<f", header, 116)
        (sform_code,) = struct.unpack_from("<h", header, 254)

        affine = np.eye(4, dtype=np.float64)
        if sform_code > 0:
            srow = struct.unpack_from("<12f", header, 280)
            affine[0, :] = srow[0:4]
            affine[1, :] = srow[4:8]
            affine[2, :] = srow[8:12]
        else:
            affine[0, 0], affine[1, 1], affine[2, 2] = spacing

        fh.seek(int(vox_offset))
        count = int(np.prod(shape))
        raw = fh.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise ValueError(f"{path}: truncated image data")

    data = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    return data, spacing, affine  # type: ignore[return-value]


def write_nifti(
    path: str | Path,
    data: np.ndarray,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    affine: np.ndarray | None = None,
    dtype: np.dtype | type = np.float32,
) -> None:
    """Write a 3D array as single-file NIfTI-1 (.nii or .nii.gz)."""
    path = Path(path)
    if data.ndim != 3:
        raise ValueError(f"expected 3D data, got shape {data.shape}")
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise ValueError(f"unsupported output dtype {dtype}")
    if affine is None:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<b", header, 38, ord("r"))  # "regular" flag, kept for readers that check it
    struct.pack_into("<8h", header, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, _CODES[dtype], dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<h", header, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", header, 280, *affine[0, :])
    struct.pack_into("<4f", header, 296, *affine[1, :])
    struct.pack_into("<4f", header, 312, *affine[2, :])
    header[344:348] = MAGIC_SINGLE

    blob = np.asfortranarray(data.astype(dtype)).tobytes(order="F")
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # pad to vox_offset
        fh.write(blob)


# ---------------------------------------------------------------------------
# Case manifests
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def save_case(case: MultiModalVolume, out_dir: str | Path) -> dict:
    """Write one case's volumes (+ mask) under ``out_dir`` and return its manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry: dict = {"case_id": case.case_id, "volumes": {}}
    for m in MODALITY_ORDER:
        vol = case.volumes[m]
        fname = f"{case.case_id}_{m.value}.nii.gz"
        write_nifti(out_dir / fname, vol.data, vol.spacing, vol.affine)
        entry["volumes"][m.value] = fname
    if case.seg_mask is not None:
        fname = f"{case.case_id}_seg.nii.gz"
        write_nifti(out_dir / fname, case.seg_mask.astype(np.uint8), dtype=np.uint8)
        entry["seg_mask"] = fname
    return entry


def load_case(entry: dict, root: str | Path) -> MultiModalVolume:
    """Inverse of :func:`save_case` given a manifest entry and the dataset root.

    Volumes are loaded in canonical modality order no matter how the
    manifest's keys are ordered on disk.
    """
    root = Path(root)
    volumes = {}
    for m in MODALITY_ORDER:
        fname = entry["volumes"].get(m.value)
        if fname is None:
            raise ValueError(f"case {entry.get('case_id')!r}: no file for modality {m.value}")
        data, spacing, affine = read_nifti(root / fname)
        volumes[m] = Volume(data=data, modality=m, spacing=spacing, affine=affine)
    seg = None
    if entry.get("seg_mask"):
        seg, _, _ = read_nifti(root / entry["seg_mask"])
        seg = (seg > 0.5).astype(np.uint8)
    return MultiModalVolume(volumes=volumes, case_id=entry["case_id"], seg_mask=seg)


def write_manifest(root: str | Path, cases: list[dict], preprocessing: dict | None = None) -> Path:
    """Write the dataset-level manifest listing every case entry."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"cases": cases}
    if preprocessing is not None:
        manifest["preprocessing"] = preprocessing
    path = root / MANIFEST_NAME
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(root: str | Path) -> dict:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    if not path.exists():
        raise FileNotFoundError(f"no manifest found at {path}")
    with open(path) as fh:
        return json.load(fh)


def cases_for_split(manifest: dict, split: str | None) -> list[dict]:
    """Manifest entries filtered by their split tag (None returns all)."""
    entries = manifest["cases"]
    if split is None:
        return entries
    return [e for e in entries if e.get("split", "train") == split]
