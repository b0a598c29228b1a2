"""Transformer layer with rotary position encoding and grouped-query attention.

Query heads are partitioned into groups; each group shares one key head and
one value head, so n_kv_groups == n_query_heads recovers standard multi-head
attention and n_kv_groups == 1 recovers multi-query attention. Rotation is
applied to queries and keys after the head projection, on interleaved
coordinate pairs, so inner products depend only on relative offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Linear, Module, RMSNorm
from .tensor import Tensor, concat, silu_np, softmax


@dataclass
class AttentionConfig:
    d_model: int
    n_query_heads: int = 4
    n_kv_groups: int = 2
    d_ff: int | None = None          # defaults to 4 * d_model
    causal: bool = True
    use_rope: bool = True
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_query_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by "
                f"n_query_heads={self.n_query_heads}")
        if self.n_query_heads % self.n_kv_groups != 0:
            raise ConfigError(
                f"n_query_heads={self.n_query_heads} not divisible by "
                f"n_kv_groups={self.n_kv_groups}")
        if self.head_dim % 2 != 0:
            raise ConfigError(
                f"head_dim={self.head_dim} must be even for rotary pairing")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_query_heads

    @property
    def resolved_d_ff(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def rope_thetas(self) -> np.ndarray:
        """theta_i = base^(-2(i-1)/head_dim) for i in [1, head_dim/2]."""
        i = np.arange(self.head_dim // 2)
        return self.rope_base ** (-2.0 * i / self.head_dim)


def rope_angles(positions: np.ndarray, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ang = np.asarray(positions, dtype=np.float64)[..., None] * thetas
    return np.cos(ang), np.sin(ang)


def rope_rotate_np(x: np.ndarray, positions, thetas: np.ndarray) -> np.ndarray:
    """Rotate interleaved pairs (x_2i, x_2i+1) by position * theta_i.

    x: [..., head_dim]; positions broadcastable against x's leading axes.
    """
    if x.shape[-1] % 2 != 0:
        raise ConfigError(f"rope requires even head_dim, got {x.shape[-1]}")
    cos, sin = rope_angles(positions, thetas)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x: Tensor, positions, thetas: np.ndarray) -> Tensor:
    """Graph version of rope_rotate_np; the rotation itself carries no parameters."""
    if x.shape[-1] % 2 != 0:
        raise ConfigError(f"rope requires even head_dim, got {x.shape[-1]}")
    cos, sin = rope_angles(positions, thetas)
    cos, sin = Tensor(cos), Tensor(sin)
    even, odd = x[..., 0::2], x[..., 1::2]
    re = even * cos - odd * sin
    ro = even * sin + odd * cos
    hd = x.shape[-1]
    pair_shape = tuple(x.shape[:-1]) + (hd // 2, 1)
    stacked = concat([re.reshape(pair_shape), ro.reshape(pair_shape)], axis=-1)
    return stacked.reshape(tuple(x.shape))


def rope_relative_property_check(q: np.ndarray, k: np.ndarray, m: int, n: int,
                                 s: int, thetas: np.ndarray,
                                 tol: float = 1e-9) -> bool:
    """Whether <rope(q,m), rope(k,n)> equals <rope(q,m+s), rope(k,n+s)>."""
    lhs = rope_rotate_np(q, np.asarray(m), thetas) @ rope_rotate_np(k, np.asarray(n), thetas)
    rhs = (rope_rotate_np(q, np.asarray(m + s), thetas)
           @ rope_rotate_np(k, np.asarray(n + s), thetas))
    return abs(lhs - rhs) <= tol


def mha_to_gqa_pool(kv_heads: np.ndarray, n_groups: int) -> np.ndarray:
    """Mean-pool per-head key/value parameters into group heads.

    kv_heads: [n_heads, ...]; heads h*group_size..(h+1)*group_size-1 form group h.
    """
    n_heads = kv_heads.shape[0]
    if n_heads % n_groups != 0:
        raise ConfigError(
            f"{n_heads} heads cannot be pooled into {n_groups} groups")
    per = n_heads // n_groups
    return kv_heads.reshape(n_groups, per, *kv_heads.shape[1:]).mean(axis=1)


@dataclass
class KVCache:
    """Per-session key/value storage for incremental decoding."""

    k: np.ndarray  # [batch, groups, capacity, head_dim]
    v: np.ndarray
    pos: int = 0

    @property
    def capacity(self) -> int:
        return self.k.shape[2]

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes

    def append(self, k_t: np.ndarray, v_t: np.ndarray) -> None:
        if self.pos >= self.capacity:
            raise ContractError(
                f"KV cache overflow: capacity {self.capacity} exhausted")
        self.k[:, :, self.pos] = k_t
        self.v[:, :, self.pos] = v_t
        self.pos += 1


class GqaAttention(Module):
    """Grouped-query attention sublayer (projection + rotation + masked mix)."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self._cfg = cfg
        d, hd = cfg.d_model, cfg.head_dim
        self.wq = Linear(d, cfg.n_query_heads * hd, rng)
        self.wk = Linear(d, cfg.n_kv_groups * hd, rng)
        self.wv = Linear(d, cfg.n_kv_groups * hd, rng)
        self.wo = Linear(cfg.n_query_heads * hd, d, rng, scale=0.1)
        self._thetas = cfg.rope_thetas()
        # query head h reads from group h // heads_per_group
        per = cfg.n_query_heads // cfg.n_kv_groups
        self._head_to_group = np.arange(cfg.n_query_heads) // per

    @property
    def config(self) -> AttentionConfig:
        return self._cfg

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, n, self._cfg.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self._cfg
        B, T, _ = x.shape
        positions = np.arange(T)
        q = self._split_heads(self.wq(x), cfg.n_query_heads)   # [B,H,T,hd]
        k = self._split_heads(self.wk(x), cfg.n_kv_groups)     # [B,G,T,hd]
        v = self._split_heads(self.wv(x), cfg.n_kv_groups)
        if cfg.use_rope:
            q = rope_rotate(q, positions, self._thetas)
            k = rope_rotate(k, positions, self._thetas)
        k = k.take(self._head_to_group, axis=1)                # [B,H,T,hd]
        v = v.take(self._head_to_group, axis=1)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(cfg.head_dim))
        if cfg.causal:
            mask = np.triu(np.full((T, T), -np.inf), k=1)
            scores = scores + Tensor(mask)
        att = softmax(scores, axis=-1)                          # [B,H,T,T]
        mixed = att @ v                                         # [B,H,T,hd]
        merged = mixed.transpose(0, 2, 1, 3).reshape(B, T, cfg.n_query_heads * cfg.head_dim)
        return self.wo(merged)

    def init_cache(self, batch: int, capacity: int) -> KVCache:
        cfg = self._cfg
        shape = (batch, cfg.n_kv_groups, capacity, cfg.head_dim)
        return KVCache(k=np.zeros(shape), v=np.zeros(shape))

    def step(self, x_t: np.ndarray, cache: KVCache) -> np.ndarray:
        """One decode step at absolute position cache.pos. x_t: [batch, d_model]."""
        cfg = self._cfg
        B = x_t.shape[0]
        hd = cfg.head_dim
        m = cache.pos
        q = self.wq.apply_np(x_t).reshape(B, cfg.n_query_heads, hd)
        k = self.wk.apply_np(x_t).reshape(B, cfg.n_kv_groups, hd)
        v = self.wv.apply_np(x_t).reshape(B, cfg.n_kv_groups, hd)
        if cfg.use_rope:
            q = rope_rotate_np(q, np.asarray(m), self._thetas)
            k = rope_rotate_np(k, np.asarray(m), self._thetas)
        cache.append(k, v)
        ks = cache.k[:, :, :cache.pos]                          # [B,G,t,hd]
        vs = cache.v[:, :, :cache.pos]
        kq = ks[:, self._head_to_group]                         # [B,H,t,hd]
        vq = vs[:, self._head_to_group]
        scores = np.einsum("bhd,bhtd->bht", q, kq) / np.sqrt(hd)
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = w / w.sum(axis=-1, keepdims=True)
        mixed = np.einsum("bht,bhtd->bhd", w, vq)
        return self.wo.apply_np(mixed.reshape(B, cfg.n_query_heads * hd))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.w_in = Linear(d_model, d_ff, rng)
        self.w_out = Linear(d_ff, d_model, rng, scale=0.1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w_out(self.w_in(x).silu())

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        return self.w_out.apply_np(silu_np(self.w_in.apply_np(x)))


@dataclass
class TransformerState:
    cache: KVCache

    @property
    def nbytes(self) -> int:
        return self.cache.nbytes


class TransformerLayer(Module):
    """Pre-norm attention and feed-forward sublayers with residuals."""

    kind = "transformer"

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.attn_norm = RMSNorm(cfg.d_model)
        self.attn = GqaAttention(cfg, rng)
        self.ffn_norm = RMSNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.resolved_d_ff, rng)

    @property
    def config(self) -> AttentionConfig:
        return self._cfg

    def __call__(self, x: Tensor) -> Tensor:
        h = x + self.attn(self.attn_norm(x))
        return h + self.ffn(self.ffn_norm(h))

    def init_state(self, batch: int, capacity: int) -> TransformerState:
        return TransformerState(cache=self.attn.init_cache(batch, capacity))

    def step(self, x_t: np.ndarray, state: TransformerState) -> tuple[np.ndarray, TransformerState]:
        h = x_t + self.attn.step(self.attn_norm.apply_np(x_t), state.cache)
        return h + self.ffn.apply_np(self.ffn_norm.apply_np(h)), state
