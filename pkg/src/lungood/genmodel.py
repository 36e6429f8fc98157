"""Fit configuration, model persistence, and validation-based selection.

Persisted models are a single file: one JSON header line (magic "GMM1" or
"NF1", dimension, hyperparameters, seed) followed by the raw little-endian
float64 parameter payload, so a round trip is bit exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import auroc
from .flow import CouplingBlock, FlowConfig, Mlp, NfModel
from .gmm import EmConfig, GmmModel
from .scoring import Aggregation, PatientRecord, score_patient


@dataclass
class FitConfig:
    em: EmConfig = field(default_factory=EmConfig)
    nf: FlowConfig = field(default_factory=FlowConfig)

    @classmethod
    def from_json(cls, path: str | Path) -> "FitConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        unknown = set(doc) - {"em", "nf"}
        if unknown:
            raise ValueError(f"unknown fit config sections: {sorted(unknown)}")
        return cls(em=EmConfig(**doc.get("em", {})), nf=FlowConfig(**doc.get("nf", {})))

    def to_dict(self) -> dict:
        return {"em": vars(self.em).copy(), "nf": vars(self.nf).copy()}


def save_model(model, path: str | Path, seed: int = 0, hyperparameters: dict | None = None):
    path = Path(path)
    if isinstance(model, GmmModel):
        header = {
            "magic": "GMM1",
            "d": model.d,
            "hyperparameters": {"k": model.k, **(hyperparameters or {})},
            "seed": seed,
        }
        payload = np.concatenate(
            [model.weights.ravel(), model.means.ravel(), model.covariances.ravel()]
        )
    elif isinstance(model, NfModel):
        header = {
            "magic": "NF1",
            "d": model.d,
            "hyperparameters": {
                "n_blocks": len(model.blocks),
                "hidden": model.blocks[0].s_net.b1.size,
                "clamp": model.clamp,
                **(hyperparameters or {}),
            },
            "seed": seed,
            "perms": [b.perm.tolist() for b in model.blocks],
        }
        payload = np.concatenate([p.ravel() for p in model.params()])
    else:
        raise TypeError(f"cannot persist model of type {type(model).__name__}")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.astype("<f8").tobytes())


def load_model(path: str | Path):
    path = Path(path)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    header = json.loads(blob[:nl].decode("utf-8"))
    body = blob[nl + 1 :]
    if len(body) % 8 != 0:
        raise ValueError(f"{path}: payload size mismatch")
    payload = np.frombuffer(body, dtype="<f8")
    magic = header.get("magic")
    d = int(header["d"])
    if magic == "GMM1":
        k = int(header["hyperparameters"]["k"])
        expected = k + k * d + k * d * d
        if payload.size != expected:
            raise ValueError(f"{path}: payload size mismatch")
        weights = payload[:k].copy()
        means = payload[k : k + k * d].reshape(k, d).copy()
        covs = payload[k + k * d :].reshape(k, d, d).copy()
        return GmmModel(weights=weights, means=means, covariances=covs)
    if magic == "NF1":
        hp = header["hyperparameters"]
        n_blocks, hidden = int(hp["n_blocks"]), int(hp["hidden"])
        d1 = (d + 1) // 2
        d2 = d // 2
        shapes = [(d1, hidden), (hidden,), (hidden, hidden), (hidden,), (hidden, d2), (d2,)]
        blocks = []
        off = 0
        for perm in header["perms"]:
            nets = []
            for _ in range(2):
                arrays = []
                for shape in shapes:
                    size = int(np.prod(shape))
                    if off + size > payload.size:
                        raise ValueError(f"{path}: payload size mismatch")
                    arrays.append(payload[off : off + size].reshape(shape).copy())
                    off += size
                nets.append(Mlp(*arrays))
            blocks.append(
                CouplingBlock(perm=np.asarray(perm, dtype=np.int64), s_net=nets[0], t_net=nets[1])
            )
        if off != payload.size or len(blocks) != n_blocks:
            raise ValueError(f"{path}: payload size mismatch")
        return NfModel(d=d, clamp=float(hp["clamp"]), blocks=blocks)
    raise ValueError(f"{path}: unknown model magic {magic!r}")


def pick_best(entries: list[tuple[float, int | None]]) -> int:
    """Index of the best (auroc, n_params) entry.

    Highest AUROC wins; exact ties go to the fewer-parameter entry (unknown
    parameter counts never win a tie), then to input order.
    """
    if not entries:
        raise ValueError("no candidates")
    best = 0
    for i in range(1, len(entries)):
        a_i, p_i = entries[i]
        a_b, p_b = entries[best]
        if a_i > a_b:
            best = i
        elif a_i == a_b:
            pi = np.inf if p_i is None else p_i
            pb = np.inf if p_b is None else p_b
            if pi < pb:
                best = i
    return best


def select_model(
    candidates: list[tuple[object, str]],
    val_patients: list[tuple[str, np.ndarray, int]],
    strategy: Aggregation = Aggregation.MEAN,
) -> tuple[object, str]:
    """Pick the candidate with the best patient-level validation AUROC.

    ``candidates`` are (model, label) pairs; ``val_patients`` are
    (patient_id, embedding matrix, disease label) triples covering both
    classes.
    """
    if not candidates:
        raise ValueError("no candidates")
    entries = []
    for model, _ in candidates:
        records: list[PatientRecord] = [
            score_patient(model, pid, Z, label, strategy) for pid, Z, label in val_patients
        ]
        n_params = getattr(model, "n_parameters", None)
        entries.append((auroc(records), n_params))
    return candidates[pick_best(entries)]
