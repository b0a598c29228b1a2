"""Top-k mixture-of-experts feed-forward layer and the MoE-augmented SSM layer.

Gate values are taken from the softmax over all experts and are NOT
renormalized after top-k selection (the sum over selected gates is <= 1);
a config flag switches on the renormalized variant. Ties in the top-k break
toward the lower expert index so routing is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import Linear, Module, RMSNorm, param
from .ssm import MambaLayer, SsmConfig
from .tensor import Tensor, silu_np, softmax


@dataclass
class MoeConfig:
    n_experts: int = 4
    top_k: int = 2
    d_ff: int | None = None       # defaults to 4 * d_model
    renormalize: bool = False

    def resolved_d_ff(self, d_model: int) -> int:
        return self.d_ff if self.d_ff is not None else 4 * d_model


class Expert(Module):
    """Two-layer feed-forward map d_model -> d_ff -> d_model."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w_in = Linear(d_model, d_ff, rng)
        self.w_out = Linear(d_ff, d_model, rng, scale=0.1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w_out(self.w_in(x).silu())

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return self.w_out.apply_np(silu_np(self.w_in.apply_np(x)))


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _topk_lowest_index(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties to lower index."""
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


class MoeLayer(Module):
    """Routes every token independently to its top-k experts."""

    def __init__(self, d_model: int, cfg: MoeConfig, rng: np.random.Generator):
        if not 1 <= cfg.top_k <= cfg.n_experts:
            raise ConfigError(
                f"top_k={cfg.top_k} must be in [1, n_experts={cfg.n_experts}]")
        self._cfg = cfg
        self._d_model = d_model
        self.router = param(rng.normal(0.0, 1.0 / np.sqrt(d_model),
                                       size=(d_model, cfg.n_experts)))
        d_ff = cfg.resolved_d_ff(d_model)
        experts = [Expert(d_model, d_ff, rng) for _ in range(cfg.n_experts)]
        for i, e in enumerate(experts):
            setattr(self, f"expert{i}", e)
        self._experts = experts
        # observational routing histogram, logged during training
        self._routing_counts = np.zeros(cfg.n_experts, dtype=np.int64)

    @property
    def config(self) -> MoeConfig:
        return self._cfg

    @property
    def experts(self) -> list[Expert]:
        return self._experts

    @property
    def routing_counts(self) -> np.ndarray:
        return self._routing_counts.copy()

    def reset_routing_counts(self) -> None:
        self._routing_counts[:] = 0

    def active_parameter_count(self) -> int:
        per_expert = self._experts[0].parameter_count()
        return self.router.size + self._cfg.top_k * per_expert

    def route(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Single-token routing: (top-k expert indices, their gate values)."""
        p = _softmax_np(np.asarray(x, dtype=np.float64) @ self.router.data)
        idx = _topk_lowest_index(p, self._cfg.top_k)
        gates = p[idx]
        if self._cfg.renormalize:
            gates = gates / gates.sum()
        return idx, gates

    def _gate_mask(self, p: np.ndarray) -> np.ndarray:
        idx = _topk_lowest_index(p, self._cfg.top_k)
        mask = np.zeros_like(p)
        np.put_along_axis(mask, idx, 1.0, axis=-1)
        self._routing_counts += np.bincount(
            idx.reshape(-1), minlength=self._cfg.n_experts)
        return mask

    def __call__(self, x: Tensor) -> Tensor:
        """x: [..., d_model]; each position routed separately."""
        p = softmax(x @ self.router, axis=-1)
        mask = Tensor(self._gate_mask(p.data))
        gates = p * mask
        if self._cfg.renormalize:
            gates = gates / gates.sum(axis=-1, keepdims=True)
        out = None
        for i, expert in enumerate(self._experts):
            term = gates[..., i:i + 1] * expert(x)
            out = term if out is None else out + term
        return out

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        p = _softmax_np(x @ self.router.data)
        mask = self._gate_mask(p)
        gates = p * mask
        if self._cfg.renormalize:
            gates = gates / gates.sum(axis=-1, keepdims=True)
        out = np.zeros_like(x)
        for i, expert in enumerate(self._experts):
            out += gates[..., i:i + 1] * expert.apply_np(x)
        return out


class MoeMambaLayer(Module):
    """Selective-SSM block followed by a pre-norm MoE sublayer with residual."""

    kind = "moe_mamba"

    def __init__(self, ssm_cfg: SsmConfig, moe_cfg: MoeConfig,
                 rng: np.random.Generator, moe_rng: np.random.Generator | None = None):
        self.mamba = MambaLayer(ssm_cfg, rng)
        self.moe_norm = RMSNorm(ssm_cfg.d_model)
        self.moe = MoeLayer(ssm_cfg.d_model, moe_cfg, moe_rng if moe_rng is not None else rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.mamba(x)
        return h + self.moe(self.moe_norm(h))

    def init_state(self, batch: int):
        return self.mamba.init_state(batch)

    def step(self, x_t: np.ndarray, state):
        h, state = self.mamba.step(x_t, state)
        return h + self.moe.apply_np(self.moe_norm.apply_np(h)), state
