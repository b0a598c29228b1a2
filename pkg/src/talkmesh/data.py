"""Dataset records, the synthetic data generator, and the on-disk layout.

Directory layout (shared by synthetic and VOCASET-shaped data):

    manifest.txt                      # record_id sentence_id subject split
    templates/<subject>.msq           # single-frame neutral mesh
    motion/<record_id>.msq            # offset frames from that template
    audio/<record_id>.wav             # 16 kHz mono waveform, or
    features/<record_id>.npz          # precomputed features (frames, source_rate)
    masks/lips.txt, masks/upper.txt   # vertex index files (optional)

The synthetic generator emits feature matrices directly so decoder behaviour
can be exercised without the conv frontend; motion is a subject-specific
linear readout of the (already frame-aligned) features, which makes the
audio-to-motion mapping learnable by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .audio import SpeechFeatures, Waveform, load_wav, resample_linear
from .errors import ContractError
from .motion import MotionSequence, load_motion, save_motion

SPLITS = ("train", "val", "test")


@dataclass
class DatasetRecord:
    record_id: str
    sentence_id: str
    subject: str
    subject_id: int           # row in the style table (position in subjects())
    split: str
    audio: SpeechFeatures | Waveform
    motion: MotionSequence
    template: np.ndarray      # [V, 3] neutral mesh

    @property
    def n_frames(self) -> int:
        return self.motion.n_frames

    @property
    def n_vertices(self) -> int:
        return self.motion.n_vertices


def subjects(records: list[DatasetRecord]) -> list[str]:
    return sorted({r.subject for r in records})


def split_records(records: list[DatasetRecord], split: str) -> list[DatasetRecord]:
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}; expected one of {SPLITS}")
    return [r for r in records if r.split == split]


def _smooth_tracks(rng: np.random.Generator, n_frames: int, dim: int,
                   harmonics: int = 3) -> np.ndarray:
    """Sum-of-sinusoids tracks, one column per feature dimension."""
    t = np.arange(n_frames) / max(n_frames - 1, 1)
    freq = rng.uniform(0.5, 3.0, size=(dim, harmonics))
    phase = rng.uniform(0.0, 2 * np.pi, size=(dim, harmonics))
    amp = rng.uniform(0.3, 1.0, size=(dim, harmonics))
    tracks = np.zeros((n_frames, dim))
    for d in range(dim):
        tracks[:, d] = (amp[d][:, None]
                        * np.sin(2 * np.pi * freq[d][:, None] * t + phase[d][:, None])).sum(axis=0)
    return tracks


def synth_dataset(n_subjects: int = 2, n_sentences: int = 8, frames: int = 60,
                  vertices: int = 240, feature_dim: int = 64, seed: int = 0,
                  fps: float = 30.0, motion_scale: float = 0.01,
                  source_rate_factor: int = 2) -> list[DatasetRecord]:
    """Deterministic procedural dataset; same seed gives bit-identical records.

    Each sentence has one feature track (shared across subjects); each subject
    applies its own linear style map, so motion is a deterministic function of
    (features, subject). Features are sampled at source_rate_factor times the
    motion rate to exercise resampling.
    """
    if min(n_subjects, n_sentences, frames, vertices) < 1:
        raise ContractError("all synthetic dataset counts must be >= 1")
    rng = np.random.default_rng([seed, 97])
    subject_names = [f"subject{c}" for c in range(n_subjects)]
    templates = {name: rng.normal(0.0, 1.0, size=(vertices, 3))
                 for name in subject_names}
    styles = {name: rng.normal(0.0, 1.0 / np.sqrt(feature_dim),
                               size=(feature_dim, vertices * 3))
              for name in subject_names}
    offsets = {name: rng.normal(0.0, 0.3, size=vertices * 3)
               for name in subject_names}

    t_src = max(frames * source_rate_factor, 2)
    records = []
    for s in range(n_sentences):
        sentence_id = f"sentence{s:02d}"
        track = _smooth_tracks(np.random.default_rng([seed, 97, 11, s]),
                               t_src, feature_dim)
        # motion is generated from the linearly resampled track, so the
        # mapping the decoder sees is exactly linear
        aligned = resample_linear(track, frames)
        if s < n_sentences - 2 or n_sentences <= 2:
            split = "train"
        elif s == n_sentences - 2:
            split = "val"
        else:
            split = "test"
        for subject_id, name in enumerate(subject_names):
            flat = (aligned @ styles[name] + offsets[name]) * motion_scale
            motion = MotionSequence(frames=flat.reshape(frames, vertices, 3),
                                    fps=fps)
            records.append(DatasetRecord(
                record_id=f"{sentence_id}__{name}",
                sentence_id=sentence_id,
                subject=name,
                subject_id=subject_id,
                split=split,
                audio=SpeechFeatures(frames=track.copy(),
                                     source_rate=fps * source_rate_factor),
                motion=motion,
                template=templates[name].copy(),
            ))
    return records


def default_masks(vertices: int) -> dict[str, list[int]]:
    """Synthetic-mesh convention: first third lips, last third upper face."""
    third = max(vertices // 3, 1)
    return {"lips": list(range(third)),
            "upper": list(range(vertices - third, vertices))}


def save_dataset(out_dir, records: list[DatasetRecord],
                 masks: dict[str, list[int]] | None = None) -> None:
    out_dir = Path(out_dir)
    (out_dir / "motion").mkdir(parents=True, exist_ok=True)
    (out_dir / "templates").mkdir(exist_ok=True)
    lines = []
    for r in records:
        lines.append(f"{r.record_id} {r.sentence_id} {r.subject} {r.split}")
        save_motion(out_dir / "motion" / f"{r.record_id}.msq", r.motion)
        if isinstance(r.audio, SpeechFeatures):
            (out_dir / "features").mkdir(exist_ok=True)
            np.savez(out_dir / "features" / f"{r.record_id}.npz",
                     frames=r.audio.frames, source_rate=r.audio.source_rate)
        else:
            (out_dir / "audio").mkdir(exist_ok=True)
            wavfile.write(out_dir / "audio" / f"{r.record_id}.wav",
                          r.audio.sample_rate,
                          r.audio.samples.astype(np.float32))
    for r in records:
        tpath = out_dir / "templates" / f"{r.subject}.msq"
        if not tpath.exists():
            save_motion(tpath, MotionSequence(frames=r.template[None],
                                              fps=r.motion.fps))
    (out_dir / "manifest.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    if masks:
        (out_dir / "masks").mkdir(exist_ok=True)
        for name, idx in masks.items():
            (out_dir / "masks" / f"{name}.txt").write_text(
                "\n".join(str(i) for i in idx) + "\n")


def load_dataset(path, expected_vertices: int | None = None) -> list[DatasetRecord]:
    """Load a dataset directory; an empty manifest yields an empty list."""
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise ContractError(f"{path}: no manifest.txt found")
    rows = []
    for line in manifest.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ContractError(
                f"manifest line needs 'record_id sentence_id subject split', got {line!r}")
        rows.append(parts)
    if not rows:
        return []

    names = sorted({subject for _, _, subject, _ in rows})
    subject_index = {name: i for i, name in enumerate(names)}
    templates: dict[str, np.ndarray] = {}
    for name in names:
        tpath = path / "templates" / f"{name}.msq"
        if not tpath.exists():
            raise ContractError(f"missing template for subject {name!r}: {tpath}")
        tseq = load_motion(tpath)
        templates[name] = tseq.frames[0]

    records = []
    for record_id, sentence_id, subject, split in rows:
        if split not in SPLITS:
            raise ContractError(
                f"{record_id}: split {split!r} not one of {SPLITS}")
        motion = load_motion(path / "motion" / f"{record_id}.msq")
        v = motion.n_vertices
        if expected_vertices is not None and v != expected_vertices:
            raise ContractError(
                f"{record_id}: {v} vertices where {expected_vertices} required")
        if templates[subject].shape[0] != v:
            raise ContractError(
                f"{record_id}: motion has {v} vertices but template for "
                f"{subject!r} has {templates[subject].shape[0]}")
        feat_path = path / "features" / f"{record_id}.npz"
        wav_path = path / "audio" / f"{record_id}.wav"
        if feat_path.exists():
            blob = np.load(feat_path)
            audio = SpeechFeatures(frames=blob["frames"],
                                   source_rate=float(blob["source_rate"]))
        elif wav_path.exists():
            audio = load_wav(wav_path)
        else:
            raise ContractError(f"{record_id}: no audio found "
                                f"(looked for {feat_path} and {wav_path})")
        records.append(DatasetRecord(
            record_id=record_id, sentence_id=sentence_id, subject=subject,
            subject_id=subject_index[subject], split=split, audio=audio,
            motion=motion, template=templates[subject]))
    return records


VOCASET_VERTICES = 5023


def load_vocaset_layout(path) -> list[DatasetRecord]:
    """VOCASET-shaped dataset: 5023-vertex meshes, fps from the motion header
    (60 for real captures), and the usual train/val/test split tags."""
    return load_dataset(path, expected_vertices=VOCASET_VERTICES)
