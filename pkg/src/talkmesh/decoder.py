"""Hybrid decoder: stacked state-space layers around one attention layer.

The stack is three layers on each side of a central Transformer layer. Each
side mixes plain Mamba layers and MoE_Mamba layers; the arrangement name fixes
the first layer's kind on each side (M or MoE) and the remaining two alternate
so both kinds appear on every side:

    M-MoE    left [mamba, moe_mamba, mamba]      right [moe_mamba, mamba, moe_mamba]
    MoE-MoE  left [moe_mamba, mamba, moe_mamba]  right [moe_mamba, mamba, moe_mamba]
    M-M      left [mamba, moe_mamba, mamba]      right [mamba, moe_mamba, mamba]
    MoE-M    left [moe_mamba, mamba, moe_mamba]  right [mamba, moe_mamba, mamba]

Tokens are previous-frame motion embeddings plus a per-subject style vector
plus a periodic positional encoding, fused with frame-aligned audio features
by addition. Decoding is autoregressive from a zero motion seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, TransformerLayer
from .errors import ConfigError, ContractError, SessionExhausted
from .moe import MoeConfig, MoeMambaLayer
from .motion import MotionSequence
from .nn import Linear, Module, param
from .ssm import MambaLayer, SsmConfig
from .tensor import Tensor

ARRANGEMENTS = {
    "M-MoE": ("mamba", "moe_mamba"),
    "MoE-MoE": ("moe_mamba", "moe_mamba"),
    "M-M": ("mamba", "mamba"),
    "MoE-M": ("moe_mamba", "mamba"),
}


def side_kinds(first: str, layers_per_side: int) -> list[str]:
    other = "moe_mamba" if first == "mamba" else "mamba"
    return [first if i % 2 == 0 else other for i in range(layers_per_side)]


@dataclass
class DecoderConfig:
    vertex_count: int
    n_subjects: int
    arrangement: str = "MoE-MoE"
    d_model: int = 64
    layers_per_side: int = 3
    ppe_period: int = 30
    use_ppe: bool = True
    # selective-SSM sublayer
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    # attention sublayer
    n_query_heads: int = 4
    n_kv_groups: int = 2
    use_rope: bool = True
    attn_d_ff: int | None = None
    # mixture-of-experts sublayer
    n_experts: int = 4
    top_k: int = 2
    moe_d_ff: int | None = None
    renormalize_gates: bool = False

    def __post_init__(self):
        if self.arrangement not in ARRANGEMENTS:
            raise ConfigError(
                f"unknown arrangement {self.arrangement!r}; "
                f"expected one of {sorted(ARRANGEMENTS)}")
        if self.ppe_period < 1:
            raise ConfigError(f"ppe_period must be >= 1, got {self.ppe_period}")

    def ssm_config(self) -> SsmConfig:
        return SsmConfig(d_model=self.d_model, d_state=self.d_state,
                         d_conv=self.d_conv, expand=self.expand)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d_model,
                               n_query_heads=self.n_query_heads,
                               n_kv_groups=self.n_kv_groups,
                               d_ff=self.attn_d_ff, use_rope=self.use_rope)

    def moe_config(self) -> MoeConfig:
        return MoeConfig(n_experts=self.n_experts, top_k=self.top_k,
                         d_ff=self.moe_d_ff, renormalize=self.renormalize_gates)

    def layer_kind_plan(self) -> list[str]:
        left_first, right_first = ARRANGEMENTS[self.arrangement]
        return (side_kinds(left_first, self.layers_per_side)
                + ["transformer"]
                + side_kinds(right_first, self.layers_per_side))


def periodic_positional_encoding(period: int, d_model: int) -> np.ndarray:
    """Sinusoidal table over one period; positions index it modulo the period."""
    pos = np.arange(period)[:, None]
    div = 10000.0 ** (2.0 * (np.arange(d_model) // 2) / d_model)
    table = pos / div
    table[:, 0::2] = np.sin(table[:, 0::2])
    table[:, 1::2] = np.cos(table[:, 1::2])
    return table


class Decoder(Module):
    """Motion embedding, the hybrid layer stack, and the vertex output head."""

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        self._cfg = cfg
        v3 = cfg.vertex_count * 3
        # component-keyed rng streams keep shared weights identical across
        # arrangements (layer kind changes must not shift other streams)
        self.motion_in = Linear(v3, cfg.d_model,
                                np.random.default_rng([seed, 300]))
        self.style = param(np.random.default_rng([seed, 301])
                           .normal(0.0, 0.01, size=(cfg.n_subjects, cfg.d_model)))
        layers: list[Module] = []
        for i, kind in enumerate(cfg.layer_kind_plan()):
            ssm_rng = np.random.default_rng([seed, 10 + i])
            if kind == "mamba":
                layers.append(MambaLayer(cfg.ssm_config(), ssm_rng))
            elif kind == "moe_mamba":
                layers.append(MoeMambaLayer(
                    cfg.ssm_config(), cfg.moe_config(), ssm_rng,
                    moe_rng=np.random.default_rng([seed, 100 + i])))
            else:
                layers.append(TransformerLayer(
                    cfg.attention_config(), np.random.default_rng([seed, 200])))
        self.layers = layers
        self.head = Linear(cfg.d_model, v3, np.random.default_rng([seed, 302]),
                           bias=True)
        # zero-initialized head: the untrained decoder emits the neutral pose
        self.head.weight.data[:] = 0.0
        self._ppe = (periodic_positional_encoding(cfg.ppe_period, cfg.d_model)
                     if cfg.use_ppe else np.zeros((cfg.ppe_period, cfg.d_model)))

    @property
    def config(self) -> DecoderConfig:
        return self._cfg

    def layer_kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    # -- embedding ------------------------------------------------------------

    def _style_row(self, subject_id: int) -> np.ndarray:
        if not 0 <= subject_id < self._cfg.n_subjects:
            raise ContractError(
                f"unknown subject id {subject_id}; "
                f"style table has {self._cfg.n_subjects} rows")
        return self.style.data[subject_id]

    def ppe_at(self, positions) -> np.ndarray:
        return self._ppe[np.asarray(positions) % self._cfg.ppe_period]

    def embed_motion(self, prev_motion: Tensor, subject_id: int,
                     positions) -> Tensor:
        """prev_motion: [..., V*3] flattened previous frames -> [..., d_model].

        Linear motion projection + additive style vector + periodic positional
        term at (t mod p).
        """
        self._style_row(subject_id)  # validate id
        style = self.style[subject_id]
        return self.motion_in(prev_motion) + style + Tensor(self.ppe_at(positions))

    def embed_motion_np(self, prev_motion: np.ndarray, subject_id: int,
                        t: int) -> np.ndarray:
        return (self.motion_in.apply_np(prev_motion)
                + self._style_row(subject_id) + self.ppe_at(t))

    @staticmethod
    def fuse_audio(motion_tokens: Tensor, audio_tokens: Tensor) -> Tensor:
        """Frame-aligned additive fusion; lengths must already agree."""
        if motion_tokens.shape[-2] != audio_tokens.shape[-2]:
            raise ContractError(
                f"audio frames ({audio_tokens.shape[-2]}) do not match motion "
                f"tokens ({motion_tokens.shape[-2]})")
        return motion_tokens + audio_tokens

    # -- full-sequence (training) path ------------------------------------------

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        x = tokens
        for layer in self.layers:
            x = layer(x)
        return x

    def teacher_forced(self, gt_motion: np.ndarray, subject_id: int,
                       audio_tokens: Tensor) -> Tensor:
        """Predict frames 0..T-1 from shifted ground truth. gt: [T, V, 3]."""
        T = gt_motion.shape[0]
        v3 = self._cfg.vertex_count * 3
        flat = np.asarray(gt_motion, dtype=np.float64).reshape(T, v3)
        prev = np.concatenate([np.zeros((1, v3)), flat[:-1]], axis=0)
        tokens = self.embed_motion(Tensor(prev), subject_id, np.arange(T))
        tokens = self.fuse_audio(tokens, audio_tokens)
        out = self.forward_tokens(tokens.reshape(1, T, self._cfg.d_model))
        pred = self.head(out).reshape(T, self._cfg.vertex_count, 3)
        return pred

    # -- incremental (generation) path -------------------------------------------

    def open_session(self, audio_tokens: np.ndarray, subject_id: int) -> "DecodeSession":
        return DecodeSession(self, np.asarray(audio_tokens, dtype=np.float64),
                             subject_id)

    def generate_from_tokens(self, audio_tokens: np.ndarray, subject_id: int,
                             fps: float) -> MotionSequence:
        session = self.open_session(audio_tokens, subject_id)
        frames = [session.decode_step() for _ in range(audio_tokens.shape[0])]
        return MotionSequence(frames=np.stack(frames), fps=fps)


class DecodeSession:
    """Owns per-layer recurrent state and the KV cache for one generation run."""

    def __init__(self, decoder: Decoder, audio_tokens: np.ndarray, subject_id: int):
        if audio_tokens.ndim != 2 or audio_tokens.shape[1] != decoder.config.d_model:
            raise ContractError(
                f"audio tokens must be [T, d_model], got {audio_tokens.shape}")
        self._decoder = decoder
        self._audio = audio_tokens
        self._subject = subject_id
        decoder._style_row(subject_id)  # validate up front
        T = audio_tokens.shape[0]
        self._states = [
            layer.init_state(1, T) if isinstance(layer, TransformerLayer)
            else layer.init_state(1)
            for layer in decoder.layers
        ]
        self._prev = np.zeros(decoder.config.vertex_count * 3)  # zero motion seed
        self._pos = 0

    @property
    def position(self) -> int:
        return self._pos

    @property
    def n_frames(self) -> int:
        return self._audio.shape[0]

    def state_bytes(self) -> dict[str, int]:
        ssm = sum(s.nbytes for s, l in zip(self._states, self._decoder.layers)
                  if not isinstance(l, TransformerLayer))
        kv = sum(s.nbytes for s, l in zip(self._states, self._decoder.layers)
                 if isinstance(l, TransformerLayer))
        return {"ssm_state_bytes": ssm, "kv_cache_bytes": kv,
                "total_bytes": ssm + kv}

    def decode_step(self) -> np.ndarray:
        """One frame of predicted vertex offsets, [V, 3]."""
        if self._pos >= self._audio.shape[0]:
            raise SessionExhausted(
                f"audio exhausted after {self._audio.shape[0]} frames")
        dec = self._decoder
        tok = dec.embed_motion_np(self._prev, self._subject, self._pos)
        x = (tok + self._audio[self._pos])[None, :]   # [1, d_model]
        for i, layer in enumerate(dec.layers):
            x, self._states[i] = layer.step(x, self._states[i])
        flat = dec.head.apply_np(x)[0]
        self._prev = flat
        self._pos += 1
        return flat.reshape(dec.config.vertex_count, 3)
