"""Audio frontend + decoder assembled into the trainable end-to-end model."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .audio import AudioFrontend, AudioFrontendConfig, ConvSpec, SpeechFeatures, Waveform
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import Decoder, DecoderConfig, DecodeSession
from .errors import ContractError
from .motion import MotionSequence
from .nn import Module
from .tensor import Tensor


class SpeechMotionModel(Module):
    """Generates per-frame vertex offsets from audio, a subject id, and the
    model's own previous predictions (teacher-forced ground truth in training)."""

    def __init__(self, decoder_cfg: DecoderConfig,
                 audio_cfg: AudioFrontendConfig | None = None, seed: int = 0):
        if audio_cfg is None:
            audio_cfg = AudioFrontendConfig(d_model=decoder_cfg.d_model)
        if audio_cfg.d_model != decoder_cfg.d_model:
            raise ContractError(
                f"frontend d_model {audio_cfg.d_model} does not match "
                f"decoder d_model {decoder_cfg.d_model}")
        self.frontend = AudioFrontend(audio_cfg, np.random.default_rng([seed, 400]))
        self.decoder = Decoder(decoder_cfg, seed=seed)

    @property
    def config(self) -> DecoderConfig:
        return self.decoder.config

    def audio_tokens(self, audio, n_frames: int) -> Tensor:
        """audio: Waveform or SpeechFeatures, resampled to exactly n_frames."""
        return self.frontend.tokens(audio, n_frames)

    def teacher_forced(self, audio, gt_motion: np.ndarray,
                       subject_id: int) -> Tensor:
        """Predicted offsets [T, V, 3] with ground-truth previous frames."""
        T = gt_motion.shape[0]
        tokens = self.audio_tokens(audio, T)
        return self.decoder.teacher_forced(gt_motion, subject_id, tokens)

    def open_session(self, audio, subject_id: int, n_frames: int) -> DecodeSession:
        if n_frames <= 0:
            raise ContractError(f"n_frames must be positive, got {n_frames}")
        tokens = self.audio_tokens(audio, n_frames).data
        return self.decoder.open_session(tokens, subject_id)

    def generate(self, audio, subject_id: int, n_frames: int,
                 fps: float = 30.0) -> MotionSequence:
        """Autoregressive generation from the zero motion seed; deterministic."""
        session = self.open_session(audio, subject_id, n_frames)
        frames = np.stack([session.decode_step() for _ in range(n_frames)])
        return MotionSequence(frames=frames, fps=fps)

    # -- parameter accounting (used by the benchmark report) --------------------

    def total_parameter_count(self) -> int:
        return self.parameter_count()

    def active_parameter_count(self) -> int:
        """Total minus the un-routed experts of every MoE layer."""
        inactive = 0
        for layer in self.decoder.layers:
            moe = getattr(layer, "moe", None)
            if moe is not None:
                per_expert = moe.experts[0].parameter_count()
                inactive += (moe.config.n_experts - moe.config.top_k) * per_expert
        return self.parameter_count() - inactive


def save_model(path, model: SpeechMotionModel) -> Path:
    """Checkpoint container plus a JSON sidecar describing the architecture."""
    path = Path(path)
    save_checkpoint(path, model.state_dict())
    sidecar = {
        "decoder": dataclasses.asdict(model.decoder.config),
        "audio": dataclasses.asdict(model.frontend.config),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_model(path) -> SpeechMotionModel:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise ContractError(f"missing architecture sidecar {sidecar}")
    blob = json.loads(sidecar.read_text())
    decoder_cfg = DecoderConfig(**blob["decoder"])
    audio_blob = dict(blob["audio"])
    audio_blob["convs"] = [ConvSpec(**c) for c in audio_blob["convs"]]
    model = SpeechMotionModel(decoder_cfg, AudioFrontendConfig(**audio_blob))
    model.load_state_dict(load_checkpoint(path))
    return model
