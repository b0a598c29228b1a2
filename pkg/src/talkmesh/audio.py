"""Trainable audio frontend: strided temporal convolutions, linear-interpolation
resampling to the motion frame rate, and a linear projection to the decoder
width. A stand-in for a pretrained speech encoder, kept deliberately small so
it can be trained jointly from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, ContractError
from .nn import Linear, Module, param
from .tensor import Tensor, silu_np


@dataclass
class Waveform:
    samples: np.ndarray  # mono, float64
    sample_rate: int


@dataclass
class SpeechFeatures:
    frames: np.ndarray   # [T', D]
    source_rate: float   # feature frames per second

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(
                f"speech features must be [T', D] with T' >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("speech features contain non-finite values")


@dataclass
class ConvSpec:
    kernel: int
    stride: int
    channels: int


@dataclass
class AudioFrontendConfig:
    d_model: int
    feature_dim: int = 64
    sample_rate: int = 16000
    convs: list[ConvSpec] = field(default_factory=lambda: [
        ConvSpec(kernel=10, stride=5, channels=64),
        ConvSpec(kernel=4, stride=4, channels=64),
        ConvSpec(kernel=4, stride=4, channels=64),
    ])
    freeze_convs: bool = False

    def __post_init__(self):
        if self.convs and self.convs[-1].channels != self.feature_dim:
            raise ConfigError(
                f"last conv channels ({self.convs[-1].channels}) must equal "
                f"feature_dim ({self.feature_dim})")

    @property
    def total_stride(self) -> int:
        s = 1
        for c in self.convs:
            s *= c.stride
        return s

    @property
    def min_samples(self) -> int:
        """Smallest waveform length that yields one feature frame."""
        need = 1
        for c in reversed(self.convs):
            need = c.kernel + (need - 1) * c.stride
        return need

    @property
    def feature_rate(self) -> float:
        return self.sample_rate / self.total_stride


def conv_out_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1 if length >= kernel else 0


def resample_linear(frames: np.ndarray, t_target: int) -> np.ndarray:
    """Per-column linear interpolation onto t_target frames, endpoints exact."""
    frames = np.asarray(frames, dtype=np.float64)
    t_src = frames.shape[0]
    if t_src < 2:
        raise ContractError(f"resampling needs at least 2 source frames, got {t_src}")
    if t_target < 1:
        raise ContractError(f"t_target must be >= 1, got {t_target}")
    lo, hi, w = _interp_coeffs(t_src, t_target)
    return (1.0 - w)[:, None] * frames[lo] + w[:, None] * frames[hi]


def _interp_coeffs(t_src: int, t_target: int):
    if t_target == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(t_target) * (t_src - 1) / (t_target - 1)
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, t_src - 2)
    w = pos - lo
    return lo, lo + 1, w


def load_wav(path) -> Waveform:
    """Mono PCM16 or float32 WAV at 16 kHz; anything else is rejected."""
    path = Path(path)
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ContractError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ContractError(
            f"{path}: unsupported sample format {data.dtype} (need int16 or float32)")
    return Waveform(samples=samples, sample_rate=int(rate))


class AudioFrontend(Module):
    """extract (TCN) -> resample (linear) -> project (affine to d_model)."""

    def __init__(self, cfg: AudioFrontendConfig, rng: np.random.Generator):
        self._cfg = cfg
        weights = []
        in_ch = 1
        for spec in cfg.convs:
            fan_in = spec.kernel * in_ch
            weights.append(param(rng.normal(
                0.0, 1.0 / np.sqrt(fan_in), size=(spec.kernel * in_ch, spec.channels))))
            in_ch = spec.channels
        self.conv_weights = weights
        self.conv_biases = [param(np.zeros(s.channels)) for s in cfg.convs]
        if cfg.freeze_convs:
            for w in self.conv_weights + self.conv_biases:
                w.requires_grad = False
        self.proj = Linear(cfg.feature_dim, cfg.d_model, rng, bias=True)

    @property
    def config(self) -> AudioFrontendConfig:
        return self._cfg

    def _check_waveform(self, wave: Waveform) -> np.ndarray:
        cfg = self._cfg
        if wave.sample_rate != cfg.sample_rate:
            raise ContractError(
                f"expected {cfg.sample_rate} Hz audio, got {wave.sample_rate} Hz "
                "(raw-audio resampling is out of scope)")
        samples = np.asarray(wave.samples, dtype=np.float64)
        if samples.size < cfg.min_samples:
            raise ContractError(
                f"waveform of {samples.size} samples is shorter than the "
                f"receptive field; need at least {cfg.min_samples}")
        return samples

    def extract(self, wave: Waveform) -> Tensor:
        """Waveform -> [T', D] feature tensor (graph-recorded)."""
        x = Tensor(self._check_waveform(wave).reshape(-1, 1))
        for spec, w, b in zip(self._cfg.convs, self.conv_weights, self.conv_biases):
            t_out = conv_out_length(x.shape[0], spec.kernel, spec.stride)
            idx = np.arange(t_out)[:, None] * spec.stride + np.arange(spec.kernel)
            windows = x.take(idx, axis=0)          # [T_out, K, C_in]
            flat = windows.reshape(t_out, spec.kernel * x.shape[1])
            x = (flat @ w + b).silu()
        return x

    def extract_features(self, wave: Waveform) -> SpeechFeatures:
        feats = self.extract(wave)
        return SpeechFeatures(frames=feats.data.copy(),
                              source_rate=self._cfg.feature_rate)

    def resample(self, feats: Tensor, t_target: int) -> Tensor:
        """Graph linear interpolation; gradient flows through the gathers."""
        t_src = feats.shape[0]
        if t_src < 2:
            raise ContractError(
                f"resampling needs at least 2 source frames, got {t_src}")
        if t_target < 1:
            raise ContractError(f"t_target must be >= 1, got {t_target}")
        lo, hi, w = _interp_coeffs(t_src, t_target)
        w_col = Tensor(w[:, None])
        return feats.take(lo, axis=0) * (1.0 - w_col) + feats.take(hi, axis=0) * w_col

    def project(self, feats: Tensor) -> Tensor:
        return self.proj(feats)

    def tokens_from_waveform(self, wave: Waveform, t_target: int) -> Tensor:
        """Full frontend pass: [t_target, d_model] audio tokens."""
        return self.project(self.resample(self.extract(wave), t_target))

    def tokens_from_features(self, feats: SpeechFeatures, t_target: int) -> Tensor:
        """Precomputed-feature path (synthetic data mode skips the TCN)."""
        if feats.frames.shape[1] != self._cfg.feature_dim:
            raise ContractError(
                f"features of width {feats.frames.shape[1]} do not match "
                f"frontend feature_dim {self._cfg.feature_dim}")
        return self.project(self.resample(Tensor(feats.frames), t_target))

    def tokens(self, audio, t_target: int) -> Tensor:
        if isinstance(audio, Waveform):
            return self.tokens_from_waveform(audio, t_target)
        if isinstance(audio, SpeechFeatures):
            return self.tokens_from_features(audio, t_target)
        raise ContractError(f"unsupported audio input type {type(audio)!r}")

    def tokens_np(self, audio, t_target: int) -> np.ndarray:
        return self.tokens(audio, t_target).data
