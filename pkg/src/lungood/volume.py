"""Volume and lung-mask I/O, emphysema quantification, and patch extraction.

Volumes travel on disk as VOL1 pairs: a ``<name>.vol1.json`` sidecar next to a
``<name>.vol1.raw`` payload. The sidecar holds ``dims`` ([nx, ny, nz]),
``spacing`` ([sx, sy, sz] in mm), ``channels``, ``dtype`` ("i16le" for
volumes, "u8" for masks) and ``payload`` (raw file name, resolved relative to
the sidecar). The payload is laid out channel-major, then z-major, y, x
(x fastest), little-endian. In memory the axis order is ``(channels, nx, ny,
nz)`` for volumes and ``(nx, ny, nz)`` for masks, so a patch at origin
``(ix, iy, iz)`` is ``data[:, ix:ix+p, iy:iy+p, iz:iz+p]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

HU_MIN = -1024
HU_MAX = 3071
LAA_THRESHOLD = -950.0


@dataclass
class Volume:
    """A 3D CT grid in Hounsfield units, one or two channels.

    Channel 0 is the inspiratory acquisition; channel 1, when present, is a
    second acquisition already registered onto channel 0's grid.
    """

    data: np.ndarray  # (channels, nx, ny, nz) int16, HU
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError("volume data must have shape (channels, nx, ny, nz)")
        if self.data.shape[0] not in (1, 2):
            raise ValueError("volume must have 1 or 2 channels")
        if any(n < 1 for n in self.data.shape[1:]):
            raise ValueError("all volume dims must be >= 1")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing components must be > 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class LungMask:
    """Binary lung labels on the same grid as the parent volume (1 = lung)."""

    data: np.ndarray  # (nx, ny, nz) uint8 in {0, 1}

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("mask data must have shape (nx, ny, nz)")
        vals = np.unique(self.data)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def lung_voxel_count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass
class Patch:
    """A fixed-size multi-channel crop plus its extraction metadata.

    ``mask_coverage`` is the lung fraction of the crop and
    ``emphysema_fraction`` the low-attenuation fraction of its lung voxels,
    both in [0, 1]. Augmented copies keep the metadata of the crop they came
    from; only ``data`` changes.
    """

    data: np.ndarray  # (channels, p, p, p), HU
    origin: tuple[int, int, int]
    mask_coverage: float
    emphysema_fraction: float
    patient_id: str = ""

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> int:
        return self.data.shape[1]


@dataclass
class ManifestEntry:
    patient_id: str
    volume_path: str
    mask_path: str
    subject_label: str  # "healthy" | "diseased"
    split: str  # "train" | "val" | "test"


@dataclass
class CohortManifest:
    """Patient index of a cohort; paths are relative to ``root``."""

    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.patient_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("patient ids must be unique")
        for e in self.entries:
            if e.subject_label not in ("healthy", "diseased"):
                raise ValueError(f"bad subject_label {e.subject_label!r}")
            if e.split not in ("train", "val", "test"):
                raise ValueError(f"bad split {e.split!r}")

    def volume_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.volume_path

    def mask_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.mask_path


# ---------------------------------------------------------------------------
# VOL1 I/O


def _read_sidecar(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing sidecar {path}")
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt sidecar {path}: {exc}")
    for key in ("dims", "spacing", "channels", "dtype", "payload"):
        if key not in meta:
            raise ValueError(f"corrupt sidecar {path}: missing field {key!r}")
    return meta


def _read_payload(path: Path, meta: dict, itemsize: int) -> bytes:
    payload = path.parent / meta["payload"]
    nx, ny, nz = meta["dims"]
    expected = nx * ny * nz * meta["channels"] * itemsize
    raw = payload.read_bytes()
    if len(raw) != expected:
        raise ValueError(
            f"payload size mismatch for {payload}: got {len(raw)} bytes, expected {expected}"
        )
    return raw


def load_volume(path: str | Path) -> Volume:
    """Load a VOL1 pair, clamping intensities to [-1024, 3071] HU.

    ``path`` is the ``.vol1.json`` sidecar.
    """
    path = Path(path)
    meta = _read_sidecar(path)
    if meta["dtype"] != "i16le":
        raise ValueError(f"expected dtype i16le, got {meta['dtype']!r}")
    spacing = tuple(float(s) for s in meta["spacing"])
    if any(s <= 0 for s in spacing):
        raise ValueError(f"non-positive spacing in {path}")
    raw = _read_payload(path, meta, 2)
    nx, ny, nz = meta["dims"]
    grid = np.frombuffer(raw, dtype="<i2").reshape(meta["channels"], nz, ny, nx)
    grid = np.ascontiguousarray(grid.transpose(0, 3, 2, 1))  # -> (c, nx, ny, nz)
    grid = np.clip(grid, HU_MIN, HU_MAX).astype(np.int16)
    return Volume(data=grid, spacing=spacing)


def load_mask(path: str | Path) -> LungMask:
    """Load a VOL1 mask (dtype u8, single channel, values in {0, 1})."""
    path = Path(path)
    meta = _read_sidecar(path)
    if meta["dtype"] != "u8":
        raise ValueError(f"expected dtype u8, got {meta['dtype']!r}")
    if meta["channels"] != 1:
        raise ValueError("masks must have a single channel")
    raw = _read_payload(path, meta, 1)
    nx, ny, nz = meta["dims"]
    grid = np.frombuffer(raw, dtype=np.uint8).reshape(nz, ny, nx)
    grid = np.ascontiguousarray(grid.transpose(2, 1, 0))
    return LungMask(data=grid)


def _write_pair(base: Path, dims, spacing, channels: int, dtype: str, payload: bytes):
    base.parent.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "dims": [int(n) for n in dims],
        "spacing": [float(s) for s in spacing],
        "channels": int(channels),
        "dtype": dtype,
        "payload": base.name + ".vol1.raw",
    }
    with open(base.with_name(base.name + ".vol1.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")
    (base.parent / sidecar["payload"]).write_bytes(payload)


def write_volume(vol: Volume, base: str | Path) -> Path:
    """Write ``<base>.vol1.json`` + ``<base>.vol1.raw``; returns the sidecar path."""
    base = Path(base)
    disk = vol.data.transpose(0, 3, 2, 1).astype("<i2")
    _write_pair(base, vol.dims, vol.spacing, vol.channels, "i16le", disk.tobytes())
    return base.with_name(base.name + ".vol1.json")


def write_mask(mask: LungMask, base: str | Path, spacing=(1.0, 1.0, 1.0)) -> Path:
    base = Path(base)
    disk = mask.data.transpose(2, 1, 0).astype(np.uint8)
    _write_pair(base, mask.dims, spacing, 1, "u8", disk.tobytes())
    return base.with_name(base.name + ".vol1.json")


def load_manifest(path: str | Path) -> CohortManifest:
    """Load a cohort manifest and check that every referenced path resolves."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = [
        ManifestEntry(
            patient_id=p["patient_id"],
            volume_path=p["volume"],
            mask_path=p["mask"],
            subject_label=p["label"],
            split=p["split"],
        )
        for p in doc["patients"]
    ]
    manifest = CohortManifest(entries=entries, root=path.parent)
    for e in entries:
        for f in (manifest.volume_file(e), manifest.mask_file(e)):
            if not f.exists():
                raise FileNotFoundError(f"manifest references missing file {f}")
    return manifest


def write_manifest(manifest: CohortManifest, path: str | Path) -> None:
    doc = {
        "patients": [
            {
                "patient_id": e.patient_id,
                "volume": e.volume_path,
                "mask": e.mask_path,
                "label": e.subject_label,
                "split": e.split,
            }
            for e in manifest.entries
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Emphysema quantification and patch extraction


def emphysema_fraction(
    vol: Volume, mask: LungMask, threshold: float = LAA_THRESHOLD
) -> float:
    """Fraction of lung voxels strictly below ``threshold`` HU (channel 0)."""
    if vol.dims != mask.dims:
        raise ValueError("mask dims must match volume dims")
    lung = mask.data != 0
    n_lung = int(np.count_nonzero(lung))
    if n_lung == 0:
        raise ValueError("no lung voxels")
    below = np.count_nonzero(vol.data[0][lung] < threshold)
    return float(below) / float(n_lung)


def _axis_starts(dim: int, patch: int, stride: int) -> list[int]:
    # Walk 0, stride, 2*stride, ... and clamp the final start to dim - patch
    # so the boundary is always covered; the clamp dedups automatically.
    last = dim - patch
    starts = []
    s = 0
    while s < last:
        starts.append(s)
        s += stride
    starts.append(last)
    return starts


def extract_patch_grid(
    vol: Volume,
    mask: LungMask,
    patch_size: int = 32,
    overlap: float = 0.0,
    min_lung_coverage: float = 0.5,
    patient_id: str = "",
) -> list[Patch]:
    """Extract the regular patch grid and keep sufficiently lung-covered crops.

    The grid starts at voxel 0 on every axis with stride
    ``floor(patch_size * (1 - overlap))`` (floored at 1) and the final start
    clamped to ``dim - patch_size``. Each kept patch carries its lung coverage
    and the emphysema fraction of its own lung voxels; crops without any lung
    voxel get emphysema_fraction 0.0.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    if not 0.0 <= min_lung_coverage <= 1.0:
        raise ValueError("min_lung_coverage must be in [0, 1]")
    if any(patch_size > n for n in vol.dims):
        raise ValueError(f"patch_size {patch_size} exceeds volume dims {vol.dims}")
    if vol.dims != mask.dims:
        raise ValueError("mask dims must match volume dims")

    stride = max(1, int(np.floor(patch_size * (1.0 - overlap))))
    starts = [_axis_starts(dim, patch_size, stride) for dim in vol.dims]

    hu = vol.data
    lung = mask.data != 0
    insp = hu[0]
    patches: list[Patch] = []
    p = patch_size
    for ix in starts[0]:
        for iy in starts[1]:
            for iz in starts[2]:
                sub_lung = lung[ix : ix + p, iy : iy + p, iz : iz + p]
                coverage = float(np.count_nonzero(sub_lung)) / float(p**3)
                if coverage < min_lung_coverage:
                    continue
                n_lung = np.count_nonzero(sub_lung)
                if n_lung:
                    sub = insp[ix : ix + p, iy : iy + p, iz : iz + p]
                    frac = float(np.count_nonzero(sub[sub_lung] < LAA_THRESHOLD)) / float(n_lung)
                else:
                    frac = 0.0
                patches.append(
                    Patch(
                        data=hu[:, ix : ix + p, iy : iy + p, iz : iz + p].copy(),
                        origin=(ix, iy, iz),
                        mask_coverage=coverage,
                        emphysema_fraction=frac,
                        patient_id=patient_id,
                    )
                )
    return patches


def label_patch_normality(patch: Patch, subject_label: str) -> bool:
    """True only for patches of healthy subjects with < 1% emphysema."""
    if subject_label not in ("healthy", "diseased"):
        raise ValueError(f"bad subject_label {subject_label!r}")
    return subject_label == "healthy" and patch.emphysema_fraction < 0.01


def subsample_patches(patches: list[Patch], max_n: int = 100, seed: int = 0) -> list[Patch]:
    """Cap a patient's patch list at ``max_n``, preserving relative order.

    Under the cap the input list is returned unchanged. Above it, a uniform
    random subset (without replacement) is drawn with the seeded generator;
    the draw is deterministic for a fixed seed.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if len(patches) <= max_n:
        return list(patches)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(patches), size=max_n, replace=False))
    return [patches[i] for i in keep]


# ---------------------------------------------------------------------------
# Per-patient patch stores (the `extract` command's on-disk format)
#
# `<patient>.patches.json` mirrors the VOL1 sidecar idea: metadata plus a raw
# i16le payload of n records, each (channels, p, p, p) in the same z-major,
# y, x order as VOL1.


def write_patch_store(
    patches: list[Patch],
    patient_id: str,
    subject_label: str,
    split: str,
    out_dir: str | Path,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not patches:
        raise ValueError(f"no patches to store for {patient_id}")
    p = patches[0].size
    channels = patches[0].channels
    for pt in patches:
        if pt.size != p or pt.channels != channels:
            raise ValueError("all patches in a store must share size and channels")
    meta = {
        "magic": "PATCHES1",
        "patient_id": patient_id,
        "subject_label": subject_label,
        "split": split,
        "patch_size": p,
        "channels": channels,
        "n": len(patches),
        "dtype": "i16le",
        "payload": f"{patient_id}.patches.raw",
        "origins": [list(pt.origin) for pt in patches],
        "mask_coverage": [pt.mask_coverage for pt in patches],
        "emphysema_fraction": [pt.emphysema_fraction for pt in patches],
        "normal": [label_patch_normality(pt, subject_label) for pt in patches],
    }
    with open(out_dir / f"{patient_id}.patches.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    blob = b"".join(
        np.asarray(pt.data, dtype=np.int16).transpose(0, 3, 2, 1).astype("<i2").tobytes()
        for pt in patches
    )
    (out_dir / meta["payload"]).write_bytes(blob)
    return out_dir / f"{patient_id}.patches.json"


def read_patch_store(path: str | Path) -> tuple[dict, list[Patch]]:
    """Read one patient's store; returns (metadata, patches)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("magic") != "PATCHES1":
        raise ValueError(f"{path} is not a patch store")
    p, channels, n = meta["patch_size"], meta["channels"], meta["n"]
    raw = (path.parent / meta["payload"]).read_bytes()
    expected = n * channels * p**3 * 2
    if len(raw) != expected:
        raise ValueError(f"payload size mismatch for {path}: got {len(raw)}, expected {expected}")
    flat = np.frombuffer(raw, dtype="<i2").reshape(n, channels, p, p, p)
    patches = []
    for i in range(n):
        patches.append(
            Patch(
                data=np.ascontiguousarray(flat[i].transpose(0, 3, 2, 1)).astype(np.int16),
                origin=tuple(meta["origins"][i]),
                mask_coverage=float(meta["mask_coverage"][i]),
                emphysema_fraction=float(meta["emphysema_fraction"][i]),
                patient_id=meta["patient_id"],
            )
        )
    return meta, patches


def copy_patch(patch: Patch, data: np.ndarray) -> Patch:
    """New patch with replaced voxel data and untouched metadata."""
    if data.shape != patch.data.shape:
        raise ValueError("replacement data must keep the patch shape")
    return replace(patch, data=data)
