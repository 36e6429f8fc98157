"""Patch embeddings: a deterministic handcrafted featurizer plus EMB1 I/O.

The handcrafted encoder is a stand-in for a learned one at desk scale; it
captures the intensity and texture cues that low-attenuation disease shifts.
Externally trained embeddings enter through the same EMB1 file format, so
everything downstream consumes embeddings only and never touches voxels.

EMB1 layout (normative, bit-exact):
  line 1:  JSON header ``{"magic": "EMB1", "d": <int>, "n": <int>,
           "provenance": "handcrafted"|"external"}`` terminated by ``\\n``
  then n records, each:
           u16le  byte length of the patient id
           utf-8  patient id
           u32le  patch index
           u8     normal flag (0 or 1)
           d * f32le embedding values
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import Patch

HIST_BINS = 16
HIST_RANGE = (-1024.0, 0.0)
FEATURES_PER_CHANNEL = HIST_BINS + 4


@dataclass
class Embedding:
    values: np.ndarray  # (d,) float
    patient_id: str
    patch_index: int
    normal_flag: bool


@dataclass
class EmbeddingSet:
    d: int
    rows: list[Embedding] = field(default_factory=list)
    provenance: str = "handcrafted"

    def __post_init__(self):
        if self.provenance not in ("handcrafted", "external"):
            raise ValueError(f"bad provenance {self.provenance!r}")
        seen = set()
        for row in self.rows:
            if len(row.values) != self.d:
                raise ValueError("embedding dimension mismatch")
            if not np.all(np.isfinite(row.values)):
                raise ValueError(f"non-finite embedding for {row.patient_id}/{row.patch_index}")
            key = (row.patient_id, row.patch_index)
            if key in seen:
                raise ValueError(f"duplicate (patient_id, patch_index) {key}")
            seen.add(key)

    def matrix(self) -> np.ndarray:
        return np.array([r.values for r in self.rows], dtype=np.float64).reshape(
            len(self.rows), self.d
        )

    def normal_matrix(self) -> np.ndarray:
        vals = [r.values for r in self.rows if r.normal_flag]
        return np.array(vals, dtype=np.float64).reshape(len(vals), self.d)

    def by_patient(self) -> list[tuple[str, np.ndarray]]:
        """Group rows by patient id, preserving first-seen order."""
        order: list[str] = []
        groups: dict[str, list[np.ndarray]] = {}
        for row in self.rows:
            if row.patient_id not in groups:
                order.append(row.patient_id)
                groups[row.patient_id] = []
            groups[row.patient_id].append(row.values)
        return [(pid, np.array(groups[pid], dtype=np.float64)) for pid in order]


def _channel_features(hu: np.ndarray) -> np.ndarray:
    vox = hu.astype(np.float64)
    counts, _ = np.histogram(vox, bins=HIST_BINS, range=HIST_RANGE)
    bin_width = (HIST_RANGE[1] - HIST_RANGE[0]) / HIST_BINS
    # Normalize by total voxel count, not in-range count, so patches whose
    # mass falls outside the window still produce finite features.
    hist = counts / (vox.size * bin_width)
    if min(vox.shape) >= 2:
        gx = np.diff(vox, axis=0)[:, :-1, :-1]
        gy = np.diff(vox, axis=1)[:-1, :, :-1]
        gz = np.diff(vox, axis=2)[:-1, :-1, :]
        grad = float(np.sqrt(gx**2 + gy**2 + gz**2).mean())
    else:
        grad = 0.0
    extra = [
        float(vox.mean()),
        float(vox.std()),
        float(np.count_nonzero(vox < -950.0)) / vox.size,
        grad,
    ]
    return np.concatenate([hist, extra])


def handcrafted_features(patch: Patch) -> Embedding:
    """20 features per channel: a 16-bin density histogram over [-1024, 0] HU,
    mean, standard deviation, the sub--950 HU fraction, and the mean forward-
    difference gradient magnitude. Channels are concatenated. All features
    except the gradient term are invariant to voxel storage order; the
    gradient is a spatial statistic and is not."""
    values = np.concatenate([_channel_features(patch.data[c]) for c in range(patch.channels)])
    return Embedding(
        values=values,
        patient_id=patch.patient_id,
        patch_index=-1,
        normal_flag=False,
    )


def featurize_patches(
    patches: list[Patch],
    patient_id: str,
    normal_flags: list[bool],
) -> list[Embedding]:
    if len(patches) != len(normal_flags):
        raise ValueError("one normal flag per patch required")
    rows = []
    for i, (patch, flag) in enumerate(zip(patches, normal_flags)):
        emb = handcrafted_features(patch)
        emb.patient_id = patient_id
        emb.patch_index = i
        emb.normal_flag = bool(flag)
        rows.append(emb)
    return rows


# ---------------------------------------------------------------------------
# EMB1 I/O


def write_embeddings(emb_set: EmbeddingSet, path: str | Path) -> None:
    path = Path(path)
    header = {
        "magic": "EMB1",
        "d": int(emb_set.d),
        "n": len(emb_set.rows),
        "provenance": emb_set.provenance,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for row in emb_set.rows:
            pid = row.patient_id.encode("utf-8")
            fh.write(struct.pack("<H", len(pid)))
            fh.write(pid)
            fh.write(struct.pack("<I", int(row.patch_index)))
            fh.write(struct.pack("<B", 1 if row.normal_flag else 0))
            fh.write(np.asarray(row.values, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> EmbeddingSet:
    path = Path(path)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header: {exc}")
    if header.get("magic") != "EMB1":
        raise ValueError(f"{path}: not an EMB1 file")
    d = int(header["d"])
    n = int(header["n"])
    body = blob[nl + 1 :]
    rows = []
    off = 0
    for _ in range(n):
        if off + 2 > len(body):
            raise ValueError(f"{path}: payload size mismatch")
        (id_len,) = struct.unpack_from("<H", body, off)
        off += 2
        if off + id_len + 5 + 4 * d > len(body):
            raise ValueError(f"{path}: payload size mismatch")
        pid = body[off : off + id_len].decode("utf-8")
        off += id_len
        (patch_index,) = struct.unpack_from("<I", body, off)
        off += 4
        flag = body[off]
        off += 1
        if flag not in (0, 1):
            raise ValueError(f"{path}: bad normal flag {flag}")
        values = np.frombuffer(body, dtype="<f4", count=d, offset=off).astype(np.float64)
        off += 4 * d
        rows.append(
            Embedding(
                values=values,
                patient_id=pid,
                patch_index=int(patch_index),
                normal_flag=bool(flag),
            )
        )
    if off != len(body):
        raise ValueError(f"{path}: payload size mismatch")
    return EmbeddingSet(d=d, rows=rows, provenance=header.get("provenance", "external"))
