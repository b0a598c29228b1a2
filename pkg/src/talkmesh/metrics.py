"""Lip vertex error and upper-face dynamics deviation.

LVE: per frame take the largest Euclidean deviation over the lip vertex set,
then average over frames. Reported in the dataset's length unit (mm here);
a squared mode exists because some published numbers use squared distances.

FDD: for each upper-face vertex, the population standard deviation of the
per-frame L2 norms of its motion, differenced ground-truth-minus-prediction
and averaged over the upper-face set. Signed by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .motion import MotionSequence


@dataclass
class VertexMask:
    lip_indices: list[int]
    upper_indices: list[int]

    def __post_init__(self):
        for name, idx in (("lip", self.lip_indices), ("upper", self.upper_indices)):
            if len(set(idx)) != len(idx):
                raise ConfigError(f"duplicate {name} vertex indices")
            if any(i < 0 for i in idx):
                raise ConfigError(f"negative {name} vertex index")
        if set(self.lip_indices) & set(self.upper_indices):
            raise ConfigError("lip and upper vertex sets must be disjoint")

    def validate_against(self, n_vertices: int) -> None:
        for name, idx in (("lip", self.lip_indices), ("upper", self.upper_indices)):
            bad = [i for i in idx if i >= n_vertices]
            if bad:
                raise ConfigError(
                    f"{name} indices {bad} out of range for {n_vertices} vertices")


def load_mask_file(path) -> list[int]:
    """One vertex index per line; '#' starts a comment."""
    indices = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            indices.append(int(line))
    return indices


def _frames(seq) -> np.ndarray:
    arr = seq.frames if isinstance(seq, MotionSequence) else np.asarray(seq, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ContractError(f"expected [T, V, 3] motion, got {arr.shape}")
    return arr


def lve(pred, gt, mask: VertexMask, squared: bool = False) -> float:
    """Mean over frames of the max lip-vertex deviation (Euclidean by default)."""
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if not mask.lip_indices:
        raise ConfigError("empty lip vertex set")
    mask.validate_against(p.shape[1])
    diff = p[:, mask.lip_indices] - g[:, mask.lip_indices]
    sq = (diff ** 2).sum(axis=-1)          # [T, n_lip] squared distances
    per_frame = sq.max(axis=1) if squared else np.sqrt(sq.max(axis=1))
    return float(per_frame.mean())


def dyn(series) -> float:
    """Population std of per-frame L2 norms of one vertex's motion. series: [T, 3]."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[-1] != 3:
        raise ContractError(f"expected [T, 3] series, got {arr.shape}")
    norms = np.linalg.norm(arr, axis=-1)
    return float(norms.std())   # population (no Bessel correction)


def fdd(pred, gt, mask: VertexMask) -> float:
    """Mean over upper-face vertices of dyn(gt) - dyn(pred); signed."""
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if not mask.upper_indices:
        raise ConfigError("empty upper vertex set")
    mask.validate_against(p.shape[1])
    idx = mask.upper_indices
    g_norms = np.linalg.norm(g[:, idx], axis=-1)   # [T, n_upper]
    p_norms = np.linalg.norm(p[:, idx], axis=-1)
    return float((g_norms.std(axis=0) - p_norms.std(axis=0)).mean())


def metric_records(sequence_id: str, lve_value: float, fdd_value: float,
                   lve_squared: float | None = None) -> list[dict]:
    """JSON-shaped per-sequence metric records."""
    records = [
        {"metric": "lve", "value": lve_value, "units": "mm",
         "sequence_id": sequence_id},
        {"metric": "fdd", "value": fdd_value, "units": "mm",
         "sequence_id": sequence_id},
    ]
    if lve_squared is not None:
        records.append({"metric": "lve_squared", "value": lve_squared,
                        "units": "mm^2", "sequence_id": sequence_id})
    return records
