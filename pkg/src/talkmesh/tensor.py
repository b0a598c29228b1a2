"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure; ``backward()`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``. Gradients are
first order only. Broadcasting follows numpy's trailing-dimension alignment.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _op(cls, data: np.ndarray, parents: Sequence["Tensor"],
            backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Build a graph node from an already-computed forward value."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; fills .grad of tracked leaves."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._op(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bw(g):
            self._accumulate(-g)

        return Tensor._op(-self.data, (self,), bw)

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._op(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / other.data ** 2, other.shape))

        return Tensor._op(out_data, (self, other), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        e = float(exponent)
        out_data = self.data ** e

        def bw(g):
            self._accumulate(g * e * self.data ** (e - 1.0))

        return Tensor._op(out_data, (self,), bw)

    # -- transcendental ----------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out_data)

        return Tensor._op(out_data, (self,), bw)

    def log(self) -> "Tensor":
        def bw(g):
            self._accumulate(g / self.data)

        return Tensor._op(np.log(self.data), (self,), bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bw(g):
            self._accumulate(g * 0.5 / out_data)

        return Tensor._op(out_data, (self,), bw)

    def sigmoid(self) -> "Tensor":
        s = sigmoid_np(self.data)

        def bw(g):
            self._accumulate(g * s * (1.0 - s))

        return Tensor._op(s, (self,), bw)

    def silu(self) -> "Tensor":
        s = sigmoid_np(self.data)
        out_data = self.data * s

        def bw(g):
            self._accumulate(g * (s + self.data * s * (1.0 - s)))

        return Tensor._op(out_data, (self,), bw)

    def softplus(self) -> "Tensor":
        # log(1 + e^x), computed as logaddexp(0, x) for stability
        out_data = np.logaddexp(0.0, self.data)

        def bw(g):
            self._accumulate(g * sigmoid_np(self.data))

        return Tensor._op(out_data, (self,), bw)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.shape).copy())

        return Tensor._op(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation --------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape

        def bw(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._op(self.data.reshape(shape), (self,), bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def bw(g):
            self._accumulate(g.transpose(inv))

        return Tensor._op(self.data.transpose(axes), (self,), bw)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        def bw(g):
            self._accumulate(g.swapaxes(a, b))

        return Tensor._op(self.data.swapaxes(a, b), (self,), bw)

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]
        if np.isscalar(out_data):
            out_data = np.asarray(out_data)

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._op(np.array(out_data), (self,), bw)

    def take(self, indices, axis: int) -> "Tensor":
        """Gather along `axis` with an integer index array (scatter-add backward)."""
        indices = np.asarray(indices, dtype=np.intp)
        axis = axis % self.ndim
        out_data = np.take(self.data, indices, axis=axis)

        def bw(g):
            full = np.zeros_like(self.data)
            moved = np.moveaxis(full, axis, 0)
            # g has indices.shape in place of the gathered axis
            g_moved = np.moveaxis(
                g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
            np.add.at(moved, indices, g_moved)
            self._accumulate(full)

        return Tensor._op(out_data, (self,), bw)

    # -- contractions ---------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# -- free functions ------------------------------------------------------------


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on raw arrays."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def silu_np(x: np.ndarray) -> np.ndarray:
    return x * sigmoid_np(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with trailing-dimension broadcasting of batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._op(out_data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along `axis`; -inf entries get weight exactly 0."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - inner))

    return Tensor._op(s, (x,), bw)


def expm1_over(z: Tensor) -> Tensor:
    """phi(z) = (e^z - 1) / z with the removable singularity at 0 filled in.

    Used by zero-order-hold discretization; the series branch keeps both the
    value and the derivative smooth through z = 0.
    """
    out_data = phi_np(z.data)

    def bw(g):
        zd = z.data
        small = np.abs(zd) < 1e-8
        # phi'(z) = (e^z (z - 1) + 1) / z^2, -> 1/2 as z -> 0
        safe = np.where(small, 1.0, zd)
        deriv = (np.exp(safe) * (safe - 1.0) + 1.0) / safe ** 2
        deriv = np.where(small, 0.5 + zd / 3.0, deriv)
        z._accumulate(g * deriv)

    return Tensor._op(out_data, (z,), bw)


def phi_np(z: np.ndarray) -> np.ndarray:
    """(e^z - 1)/z elementwise, with the z -> 0 limit handled by series."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    return np.where(small, 1.0 + z / 2.0, out)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._op(out_data, tensors, bw)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks every coordinate of `x`; the error metric per coordinate is
    |analytic - fd| / max(1, |analytic|). Reports only, never asserts.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    worst = 0.0
    flat = probe.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(probe).item()
        flat[i] = orig - step
        down = f(probe).item()
        flat[i] = orig
        fd = (up - down) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


def finite_diff_check_sampled(f: Callable[[Tensor], Tensor], x: Tensor,
                              n_coords: int, rng: np.random.Generator,
                              step: float = 1e-5) -> float:
    """finite_diff_check restricted to `n_coords` random coordinates of x."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = (probe.grad if probe.grad is not None
                else np.zeros_like(probe.data)).reshape(-1)

    flat = probe.data.reshape(-1)
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = f(probe).item()
        flat[i] = orig - step
        down = f(probe).item()
        flat[i] = orig
        fd = (up - down) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
    return worst
