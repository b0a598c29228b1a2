"""Motion sequences: T frames of per-vertex offsets plus file import/export.

File layout, little-endian: magic b"TMMO", version u32, T u32, V u32, fps f32,
then T*V*3 float32 frame values. Frames are offsets from a neutral template
mesh, in millimetres.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"TMMO"
VERSION = 1


@dataclass
class MotionSequence:
    frames: np.ndarray  # [T, V, 3] offsets from the neutral template (mm)
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 3:
            raise ContractError(
                f"motion frames must be [T, V, 3], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("motion frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.frames.shape[1]


def save_motion(path, seq: MotionSequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    T, V, _ = seq.frames.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIf", VERSION, T, V, float(seq.fps)))
        f.write(seq.frames.astype("<f4").tobytes())


def load_motion(path) -> MotionSequence:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a motion file (bad magic)")
    version, T, V, fps = struct.unpack_from("<IIIf", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported motion version {version}")
    expected = 20 + T * V * 3 * 4
    if len(raw) != expected:
        raise ContractError(
            f"{path}: size {len(raw)} does not match header ({expected} expected)")
    frames = np.frombuffer(raw, dtype="<f4", count=T * V * 3, offset=20)
    return MotionSequence(frames=frames.astype(np.float64).reshape(T, V, 3), fps=fps)


def export_obj_frames(out_dir, seq: MotionSequence, template: np.ndarray,
                      stem: str = "frame") -> list[Path]:
    """Write one wavefront-style .obj (vertex positions only) per frame."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = np.asarray(template, dtype=np.float64)
    if template.shape != seq.frames.shape[1:]:
        raise ContractError(
            f"template shape {template.shape} does not match motion "
            f"vertices {seq.frames.shape[1:]}")
    paths = []
    for t, frame in enumerate(seq.frames):
        path = out_dir / f"{stem}_{t:05d}.obj"
        verts = template + frame
        with open(path, "w") as f:
            f.write(f"# frame {t} of {seq.n_frames}, fps {seq.fps}\n")
            for x, y, z in verts:
                f.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        paths.append(path)
    return paths
