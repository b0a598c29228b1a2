import numpy as np
import pytest

from talkmesh.errors import ContractError
from talkmesh.motion import (
    MotionSequence,
    export_obj_frames,
    load_motion,
    save_motion,
)


def test_roundtrip(tmp_path, rng):
    frames = rng.normal(size=(6, 10, 3)).astype(np.float32).astype(np.float64)
    seq = MotionSequence(frames=frames, fps=30.0)
    path = tmp_path / "seq.msq"
    save_motion(path, seq)
    loaded = load_motion(path)
    assert loaded.fps == 30.0
    assert loaded.frames.shape == (6, 10, 3)
    assert np.array_equal(loaded.frames, frames)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.msq"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(ContractError):
        load_motion(path)


def test_truncated_file(tmp_path, rng):
    seq = MotionSequence(frames=rng.normal(size=(2, 3, 3)), fps=60.0)
    path = tmp_path / "seq.msq"
    save_motion(path, seq)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ContractError):
        load_motion(path)


def test_shape_validation():
    with pytest.raises(ContractError):
        MotionSequence(frames=np.zeros((4, 5)), fps=30.0)
    with pytest.raises(ContractError):
        MotionSequence(frames=np.full((1, 2, 3), np.nan), fps=30.0)


def test_obj_export(tmp_path, rng):
    seq = MotionSequence(frames=rng.normal(size=(3, 4, 3)), fps=30.0)
    template = rng.normal(size=(4, 3))
    paths = export_obj_frames(tmp_path / "objs", seq, template)
    assert len(paths) == 3
    lines = paths[1].read_text().strip().splitlines()
    vlines = [l for l in lines if l.startswith("v ")]
    assert len(vlines) == 4
    first = np.array([float(v) for v in vlines[0].split()[1:]])
    assert np.allclose(first, template[0] + seq.frames[1, 0], atol=1e-6)


def test_obj_export_template_mismatch(tmp_path, rng):
    seq = MotionSequence(frames=rng.normal(size=(2, 4, 3)), fps=30.0)
    with pytest.raises(ContractError):
        export_obj_frames(tmp_path, seq, np.zeros((5, 3)))
