"""Seedable patch augmentations and paired-view generation.

Three intensity/texture transforms feed the contrastive pretext task:
a nonlinear intensity remap through a cubic Bezier curve, local pixel
shuffling inside random sub-cubes, and in-/out-painting with uniform noise.
All transforms are pure functions of (input, parameters, seed) and preserve
the patch shape.

Pair datasets are written as ``pairs_index.json`` plus ``pairs.raw``: per
record two augmented views (A then B), each ``channels * p**3`` float32
little-endian values min-max normalized to [0, 1], voxels in the same
z-major, y, x order as VOL1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import Patch, copy_patch

BEZIER_SAMPLES = 1024

IDENTITY_BEZIER = ((0.0, 0.0), (1.0 / 3.0, 1.0 / 3.0), (2.0 / 3.0, 2.0 / 3.0), (1.0, 1.0))


@dataclass
class AugmentConfig:
    """Knobs for the augmentation pipeline.

    Control points must start at (0, 0) and end at (1, 1); block and paint
    sizes may not exceed the patch size they are applied to (checked at apply
    time). ``paint_in_ratio`` is the probability that a triggered paint step
    runs in-painting rather than out-painting.
    """

    bezier_points: tuple = IDENTITY_BEZIER
    shuffle_blocks: int = 10
    shuffle_block_size: int = 4
    paint_count: int = 3
    paint_size_range: tuple[int, int] = (4, 8)
    p_bezier: float = 0.9
    p_shuffle: float = 0.5
    p_paint: float = 0.5
    paint_in_ratio: float = 0.8

    def __post_init__(self):
        _check_control_points(self.bezier_points)
        for name in ("p_bezier", "p_shuffle", "p_paint", "paint_in_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.shuffle_blocks < 0 or self.paint_count < 0:
            raise ValueError("counts must be >= 0")
        lo, hi = self.paint_size_range
        if lo < 1 or hi < lo:
            raise ValueError("paint_size_range must satisfy 1 <= min <= max")

    @classmethod
    def from_json(cls, path: str | Path) -> "AugmentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {
            "bezier_points",
            "shuffle_blocks",
            "shuffle_block_size",
            "paint_count",
            "paint_size_range",
            "p_bezier",
            "p_shuffle",
            "p_paint",
            "paint_in_ratio",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown augment config fields: {sorted(unknown)}")
        if "bezier_points" in doc:
            doc["bezier_points"] = tuple(tuple(p) for p in doc["bezier_points"])
        if "paint_size_range" in doc:
            doc["paint_size_range"] = tuple(doc["paint_size_range"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "bezier_points": [list(p) for p in self.bezier_points],
            "shuffle_blocks": self.shuffle_blocks,
            "shuffle_block_size": self.shuffle_block_size,
            "paint_count": self.paint_count,
            "paint_size_range": list(self.paint_size_range),
            "p_bezier": self.p_bezier,
            "p_shuffle": self.p_shuffle,
            "p_paint": self.p_paint,
            "paint_in_ratio": self.paint_in_ratio,
        }


def _check_control_points(points):
    if len(points) != 4:
        raise ValueError("bezier curve needs exactly 4 control points")
    if tuple(points[0]) != (0.0, 0.0) or tuple(points[3]) != (1.0, 1.0):
        raise ValueError("bezier endpoints must be (0,0) and (1,1)")
    for x, y in points:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError("bezier control points must lie in [0,1]^2")


def bezier_lookup(points, n_samples: int = BEZIER_SAMPLES):
    """Sample the cubic curve densely and return a monotone x -> y table."""
    _check_control_points(points)
    pts = np.asarray(points, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n_samples)
    mt = 1.0 - t
    basis = np.stack([mt**3, 3.0 * mt**2 * t, 3.0 * mt * t**2, t**3], axis=1)
    xs = basis @ pts[:, 0]
    ys = basis @ pts[:, 1]
    # The parametric x(t) can stall or dip; force a monotone inversion grid.
    xs = np.maximum.accumulate(xs)
    return xs, ys


def bezier_intensity(patch: Patch, points=IDENTITY_BEZIER, seed: int = 0) -> Patch:
    """Remap intensities through the Bezier curve defined by ``points``.

    The patch is min-max normalized to [0, 1], pushed through the sampled
    curve with linear interpolation, and rescaled to its original HU range.
    A constant patch is returned unchanged. ``seed`` is accepted for pipeline
    symmetry; the remap itself has no random component.
    """
    _check_control_points(points)
    data = np.asarray(patch.data, dtype=np.float64)
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        return copy_patch(patch, data.copy())
    xs, ys = bezier_lookup(points)
    norm = (data - lo) / (hi - lo)
    mapped = np.interp(norm, xs, ys)
    return copy_patch(patch, mapped * (hi - lo) + lo)


def local_pixel_shuffle(patch: Patch, n_blocks: int, block_size: int, seed: int = 0) -> Patch:
    """Permute voxels inside ``n_blocks`` random sub-cubes.

    The same permutation is applied to every channel of a block so registered
    channels stay aligned. Voxels outside chosen blocks are untouched and the
    global voxel multiset is preserved exactly.
    """
    p = patch.size
    if block_size < 1 or block_size > p:
        raise ValueError("block_size must be in [1, patch size]")
    rng = np.random.default_rng(seed)
    out = np.asarray(patch.data).copy()
    for _ in range(n_blocks):
        ox, oy, oz = (int(rng.integers(0, p - block_size + 1)) for _ in range(3))
        perm = rng.permutation(block_size**3)
        block = out[:, ox : ox + block_size, oy : oy + block_size, oz : oz + block_size]
        flat = block.reshape(patch.channels, -1)
        block[...] = flat[:, perm].reshape(block.shape)
    return copy_patch(patch, out)


def paint(
    patch: Patch,
    mode: str,
    count: int,
    size_range: tuple[int, int],
    seed: int = 0,
) -> Patch:
    """Replace regions with uniform noise spanning the patch's HU range.

    ``mode="in"`` fills ``count`` random boxes with noise; ``mode="out"``
    keeps the boxes and replaces everything else. Box edge lengths are drawn
    per axis from ``size_range`` (inclusive).
    """
    if mode not in ("in", "out"):
        raise ValueError(f"paint mode must be 'in' or 'out', got {mode!r}")
    p = patch.size
    lo_s, hi_s = size_range
    if lo_s < 1 or hi_s > p or hi_s < lo_s:
        raise ValueError("size_range must satisfy 1 <= min <= max <= patch size")
    rng = np.random.default_rng(seed)
    data = np.asarray(patch.data, dtype=np.float64)
    lo = float(data.min())
    hi = float(data.max())
    in_boxes = np.zeros(data.shape[1:], dtype=bool)
    for _ in range(count):
        sx, sy, sz = (int(rng.integers(lo_s, hi_s + 1)) for _ in range(3))
        ox = int(rng.integers(0, p - sx + 1))
        oy = int(rng.integers(0, p - sy + 1))
        oz = int(rng.integers(0, p - sz + 1))
        in_boxes[ox : ox + sx, oy : oy + sy, oz : oz + sz] = True
    noise = rng.uniform(lo, hi, size=data.shape)
    target = in_boxes if mode == "in" else ~in_boxes
    out = data.copy()
    out[:, target] = noise[:, target]
    return copy_patch(patch, out)


def augment_view(patch: Patch, cfg: AugmentConfig, seed) -> Patch:
    """One augmented view: bezier, then shuffle, then paint, each gated by
    its configured probability."""
    rng = np.random.default_rng(seed)
    out = patch
    if rng.random() < cfg.p_bezier:
        out = bezier_intensity(out, cfg.bezier_points, seed=int(rng.integers(2**63)))
    if rng.random() < cfg.p_shuffle:
        out = local_pixel_shuffle(
            out, cfg.shuffle_blocks, cfg.shuffle_block_size, seed=int(rng.integers(2**63))
        )
    if rng.random() < cfg.p_paint:
        mode = "in" if rng.random() < cfg.paint_in_ratio else "out"
        out = paint(out, mode, cfg.paint_count, cfg.paint_size_range, seed=int(rng.integers(2**63)))
    return out


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def augment_pair(patch: Patch, cfg: AugmentConfig, seed=0) -> tuple[Patch, Patch]:
    """Two independently augmented views with seeds derived as (seed, view)."""
    base = _seed_list(seed)
    return (
        augment_view(patch, cfg, seed=base + [0]),
        augment_view(patch, cfg, seed=base + [1]),
    )


# ---------------------------------------------------------------------------
# Pair dataset on disk


def _normalize_view(data: np.ndarray) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


@dataclass
class PairRecord:
    patient_id: str
    patch_index: int
    view_a: np.ndarray  # (channels, p, p, p) float32 in [0, 1]
    view_b: np.ndarray


@dataclass
class PairDataset:
    channels: int
    patch_size: int
    records: list[PairRecord] = field(default_factory=list)


def write_pair_dataset(dataset: PairDataset, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {
        "magic": "PAIRS1",
        "channels": dataset.channels,
        "patch_size": dataset.patch_size,
        "n": len(dataset.records),
        "dtype": "f32le",
        "payload": "pairs.raw",
        "records": [
            {"patient_id": r.patient_id, "patch_index": r.patch_index}
            for r in dataset.records
        ],
    }
    with open(out_dir / "pairs_index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")
    chunks = []
    for r in dataset.records:
        for view in (r.view_a, r.view_b):
            chunks.append(np.asarray(view, dtype="<f4").transpose(0, 3, 2, 1).tobytes())
    (out_dir / "pairs.raw").write_bytes(b"".join(chunks))
    return out_dir / "pairs_index.json"


def read_pair_dataset(path_or_dir: str | Path) -> PairDataset:
    path = Path(path_or_dir)
    if path.is_dir():
        path = path / "pairs_index.json"
    with open(path, "r", encoding="utf-8") as fh:
        index = json.load(fh)
    if index.get("magic") != "PAIRS1":
        raise ValueError(f"{path} is not a pair dataset index")
    c, p, n = index["channels"], index["patch_size"], index["n"]
    view_len = c * p**3
    raw = (path.parent / index["payload"]).read_bytes()
    expected = n * 2 * view_len * 4
    if len(raw) != expected:
        raise ValueError(f"payload size mismatch for {path}: got {len(raw)}, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4").reshape(n, 2, c, p, p, p)
    records = []
    for i, rec in enumerate(index["records"]):
        records.append(
            PairRecord(
                patient_id=rec["patient_id"],
                patch_index=int(rec["patch_index"]),
                view_a=np.ascontiguousarray(flat[i, 0].transpose(0, 3, 2, 1)),
                view_b=np.ascontiguousarray(flat[i, 1].transpose(0, 3, 2, 1)),
            )
        )
    return PairDataset(channels=c, patch_size=p, records=records)


def build_pair_dataset(
    patches_by_patient: list[tuple[str, list[Patch]]],
    cfg: AugmentConfig,
    seed: int = 0,
) -> PairDataset:
    """Augment every patch into a normalized view pair.

    The per-patch seed is derived from (seed, patient position, patch index)
    so the dataset is reproducible and insensitive to how patients are
    batched by the caller.
    """
    if not patches_by_patient:
        raise ValueError("no patches to pair")
    first = patches_by_patient[0][1][0]
    ds = PairDataset(channels=first.channels, patch_size=first.size)
    for p_idx, (pid, patches) in enumerate(patches_by_patient):
        for i, patch in enumerate(patches):
            va, vb = augment_pair(patch, cfg, seed=[seed, p_idx, i])
            ds.records.append(
                PairRecord(
                    patient_id=pid,
                    patch_index=i,
                    view_a=_normalize_view(va.data),
                    view_b=_normalize_view(vb.data),
                )
            )
    return ds
