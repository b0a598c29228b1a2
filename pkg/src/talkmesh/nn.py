"""Parameter containers and the small shared layers (linear, RMS norm)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    """Base class providing named parameter traversal.

    Attributes that are Tensors with requires_grad are parameters; Module
    attributes and lists of Modules are walked recursively. Attribute names
    starting with an underscore are skipped, which lets a module keep
    convenience references without double-registering parameters.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value  # frozen tensors stay checkpointable
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for key, p in params.items():
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.shape:
                raise KeyError(
                    f"shape mismatch for {key}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.copy()


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    """y = x @ weight (+ bias). Weight is stored [in_features, out_features]."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = False,
                 scale: float | None = None):
        std = (scale if scale is not None else 1.0) / np.sqrt(in_features)
        self.weight = param(rng.normal(0.0, std, size=(in_features, out_features)))
        self.bias = param(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data
        if self.bias is not None:
            y = y + self.bias.data
        return y


class RMSNorm(Module):
    """Root-mean-square normalization over the last axis, learned scale."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = param(np.ones(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        ms = (x * x).mean(axis=-1, keepdims=True)
        return x * ((ms + self._eps) ** -0.5) * self.weight

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return x * (ms + self._eps) ** -0.5 * self.weight.data
