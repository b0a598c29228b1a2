"""Finite-difference verification of module gradients.

For each named parameter the tensor is temporarily swapped for a probe copy,
the loss is rebuilt, and analytic gradients are compared against central
differences on a random sample of coordinates. This is the independent oracle
backing every hand-written backward rule in the package.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .nn import Module
from .tensor import Tensor


def _resolve(root, dotted: str):
    """Walk a dotted parameter path to (owner, final key)."""
    parts = dotted.split(".")
    obj = root
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj, parts[-1]


def _get(owner, key: str):
    return owner[int(key)] if key.isdigit() else getattr(owner, key)


def _set(owner, key: str, value) -> None:
    if key.isdigit():
        owner[int(key)] = value
    else:
        setattr(owner, key, value)


def module_grad_errors(module: Module, make_loss: Callable[[], Tensor],
                       rng: np.random.Generator, coords_per_param: int = 8,
                       step: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per parameter, on sampled coordinates."""
    errors: dict[str, float] = {}
    for name, tensor in module.named_parameters().items():
        owner, key = _resolve(module, name)
        probe = Tensor(tensor.data.copy(), requires_grad=True)
        _set(owner, key, probe)
        try:
            loss = make_loss()
            loss.backward()
            analytic = (probe.grad if probe.grad is not None
                        else np.zeros_like(probe.data)).reshape(-1)
            flat = probe.data.reshape(-1)
            n = min(coords_per_param, flat.size)
            idxs = rng.choice(flat.size, size=n, replace=False)
            worst = 0.0
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                up = make_loss().item()
                flat[i] = orig - step
                down = make_loss().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * step)
                worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
            errors[name] = worst
        finally:
            _set(owner, key, tensor)
    return errors


def max_grad_error(module: Module, make_loss: Callable[[], Tensor],
                   rng: np.random.Generator, coords_per_param: int = 8,
                   step: float = 1e-5) -> float:
    errs = module_grad_errors(module, make_loss, rng, coords_per_param, step)
    return max(errs.values()) if errs else 0.0
