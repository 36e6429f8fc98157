"""Synthetic lung phantoms with controllable emphysema burden.

Each phantom is an ellipsoidal "lung" (about 40% of the grid) filled with
Gaussian parenchyma around -850 HU inside a soft-tissue background. Disease
is simulated by stamping spherical low-attenuation blobs (about -975 HU)
into the lung until the measured sub--950 HU fraction reaches the requested
burden, so every generated volume comes with a ground-truth label that the
pipeline itself can re-measure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import (
    HU_MAX,
    HU_MIN,
    CohortManifest,
    LungMask,
    ManifestEntry,
    Volume,
    write_manifest,
    write_mask,
    write_volume,
)

LUNG_SEMI_AXIS_FRACTION = 0.455  # ellipsoid occupies ~40% of the grid


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (72, 72, 72)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    parenchyma_mean: float = -850.0
    parenchyma_std: float = 40.0
    blob_mean: float = -975.0
    blob_std: float = 15.0
    blob_radius_range: tuple[int, int] = (2, 5)
    burden: float = 0.0
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.burden <= 1.0:
            raise ValueError("burden must be in [0, 1]")
        if not self.blob_mean < -950.0 < self.parenchyma_mean:
            raise ValueError("blob mean must sit below -950 HU and parenchyma above")
        if self.channels not in (1, 2):
            raise ValueError("channels must be 1 or 2")
        lo, hi = self.blob_radius_range
        if self.burden > 0 and lo < 1:
            raise ValueError("positive burden needs blob radius >= 1")
        if hi < lo:
            raise ValueError("blob_radius_range must be (min, max) with min <= max")


def _ellipsoid_mask(dims) -> np.ndarray:
    nx, ny, nz = dims
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    ax, ay, az = (LUNG_SEMI_AXIS_FRACTION * n for n in dims)
    x = (np.arange(nx) - cx)[:, None, None] / ax
    y = (np.arange(ny) - cy)[None, :, None] / ay
    z = (np.arange(nz) - cz)[None, None, :] / az
    return (x**2 + y**2 + z**2) <= 1.0


def _sphere_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    grid = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(grid, grid, grid, indexing="ij")
    keep = dx**2 + dy**2 + dz**2 <= r**2
    return np.stack([dx[keep], dy[keep], dz[keep]], axis=1)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LungMask, float]:
    """Build one phantom; returns (volume, mask, achieved emphysema burden).

    Blobs are added one at a time until the measured burden reaches
    ``spec.burden``; if repeated stamps stop changing the measurement the
    geometry has saturated and the achieved value is returned as is.
    Deterministic per seed.
    """
    rng = np.random.default_rng(spec.seed)
    lung = _ellipsoid_mask(spec.dims)
    n_lung = int(np.count_nonzero(lung))
    if n_lung == 0:
        raise ValueError(f"dims {spec.dims} too small for an ellipsoidal lung")

    grid = np.full(spec.dims, 40.0)  # soft-tissue background
    grid[lung] = rng.normal(spec.parenchyma_mean, spec.parenchyma_std, size=n_lung)

    # Count against the rounded values the stored int16 volume will carry,
    # so the loop's stopping burden matches the re-measured one exactly.
    lung_idx = np.argwhere(lung)
    below = np.count_nonzero(np.rint(grid[lung]) < -950.0)
    target = spec.burden * n_lung
    stale = 0
    while below < target:
        center = lung_idx[int(rng.integers(n_lung))]
        radius = int(rng.integers(spec.blob_radius_range[0], spec.blob_radius_range[1] + 1))
        pts = _sphere_offsets(radius) + center
        ok = np.all((pts >= 0) & (pts < np.asarray(spec.dims)), axis=1)
        pts = pts[ok]
        inside = lung[pts[:, 0], pts[:, 1], pts[:, 2]]
        pts = pts[inside]
        if pts.size == 0:
            continue
        old = np.count_nonzero(np.rint(grid[pts[:, 0], pts[:, 1], pts[:, 2]]) < -950.0)
        grid[pts[:, 0], pts[:, 1], pts[:, 2]] = rng.normal(
            spec.blob_mean, spec.blob_std, size=len(pts)
        )
        new = np.count_nonzero(np.rint(grid[pts[:, 0], pts[:, 1], pts[:, 2]]) < -950.0)
        below += new - old
        stale = stale + 1 if new == old else 0
        if stale >= 200:  # geometry saturated, nothing left to convert
            break

    channels = [grid]
    if spec.channels == 2:
        channels.append(grid + rng.normal(0.0, 10.0, size=spec.dims))
    data = np.stack(
        [np.clip(np.rint(c), HU_MIN, HU_MAX).astype(np.int16) for c in channels]
    )
    vol = Volume(data=data, spacing=spec.spacing)
    mask = LungMask(data=lung.astype(np.uint8))
    achieved = np.count_nonzero(vol.data[0][lung] < -950.0) / n_lung
    return vol, mask, float(achieved)


def _split_slices(n: int) -> tuple[int, int]:
    n_train = int(np.floor(0.6 * n))
    n_val = int(np.floor(0.2 * n))
    return n_train, n_val


def generate_cohort(
    n_healthy: int,
    n_diseased: int,
    out_dir: str | Path,
    seed: int = 0,
    dims: tuple[int, int, int] = (72, 72, 72),
    channels: int = 1,
    healthy_burden: tuple[float, float] = (0.0, 0.005),
    diseased_burden: tuple[float, float] = (0.08, 0.35),
) -> CohortManifest:
    """Write a labeled phantom cohort (VOL1 volumes, masks, manifest).

    Splits are 60/20/20 train/val/test, stratified by class with a seeded
    shuffle. Per-patient burdens are drawn uniformly from the class range.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []

    for label, count, burden_range, prefix in (
        ("healthy", n_healthy, healthy_burden, "h"),
        ("diseased", n_diseased, diseased_burden, "d"),
    ):
        splits = ["train"] * _split_slices(count)[0]
        splits += ["val"] * _split_slices(count)[1]
        splits += ["test"] * (count - len(splits))
        order = rng.permutation(count)
        assigned = [None] * count
        for pos, patient in enumerate(order):
            assigned[patient] = splits[pos]
        for i in range(count):
            pid = f"{prefix}{i:03d}"
            burden = float(rng.uniform(*burden_range))
            spec = PhantomSpec(
                dims=dims,
                channels=channels,
                burden=burden,
                seed=int(rng.integers(2**63)),
            )
            vol, mask, _ = generate_phantom(spec)
            write_volume(vol, out_dir / pid)
            write_mask(mask, out_dir / f"{pid}_mask", spacing=spec.spacing)
            entries.append(
                ManifestEntry(
                    patient_id=pid,
                    volume_path=f"{pid}.vol1.json",
                    mask_path=f"{pid}_mask.vol1.json",
                    subject_label=label,
                    split=assigned[i],
                )
            )

    manifest = CohortManifest(entries=entries, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
