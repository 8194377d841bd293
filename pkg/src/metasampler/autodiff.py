"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and remembers how it was produced; calling
:func:`backward` on a scalar output walks the recorded graph once in reverse
topological order and returns gradients for the requested leaves.  The op set
is exactly what small MLPs, softmax policies and the margin/cross-entropy
losses need.  Everything is double precision: meta-gradients are differences
of near-equal quantities and do not survive float32.

Graphs are built per forward pass and are single-threaded; distinct graphs
share no mutable state (gradients live in a per-call dict, never on tensors).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction/backward failures."""


class ShapeError(AutodiffError):
    """Operands do not fit the op; message names the op and the shapes."""


class NumericalError(AutodiffError):
    """NaN or Inf encountered where a finite value is required."""


class Tensor:
    """A node in the computation graph: a float64 array plus provenance."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant leaf sharing this tensor's values."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the broadcast axes of ``grad`` away so it matches ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_forward(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_forward("add", a, b, np.add)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, "add", (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_forward("sub", a, b, np.subtract)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, "sub", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_forward("mul", a, b, np.multiply)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, "mul", (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = _binary_forward("div", a, b, np.divide)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, "div", (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    data = _binary_forward("matmul", a, b, np.matmul)

    def grad_fn(g):
        an, bn = a.data.ndim, b.data.ndim
        if an == 2 and bn == 2:
            return g @ b.data.T, a.data.T @ g
        if an == 1 and bn == 2:
            return b.data @ g, np.outer(a.data, g)
        if an == 2 and bn == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data  # vector dot -> scalar

    return _node(data, "matmul", (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    """max(x, 0) elementwise; the subgradient at 0 is 0."""
    mask = x.data > 0.0
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _node(data, "exp", (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)
    return _node(data, "sqrt", (x,), lambda g: (g / (2.0 * data),))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def pow_const(x: Tensor, exponent: float) -> Tensor:
    data = x.data ** exponent
    return _node(
        data, "pow", (x,), lambda g: (g * exponent * x.data ** (exponent - 1.0),)
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _node(data, "softmax", (x,), grad_fn)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)

    def grad_fn(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _node(data, "logsumexp", (x,), grad_fn)


def pick(x: Tensor, index: int) -> Tensor:
    """Select one entry of a vector as a scalar."""
    if x.data.ndim != 1:
        raise ShapeError(f"pick: expected a vector, got shape {x.shape}")
    if not 0 <= index < x.data.shape[0]:
        raise ShapeError(f"pick: index {index} out of range for shape {x.shape}")

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _node(x.data[index], "pick", (x,), grad_fn)


def pick_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """x[i, indices[i]] for each row i of a matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"pick_rows: expected a matrix, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (x.data.shape[0],):
        raise ShapeError(
            f"pick_rows: indices shape {idx.shape} does not match rows of {x.shape}"
        )
    if idx.min() < 0 or idx.max() >= x.data.shape[1]:
        raise ShapeError(f"pick_rows: index out of range for shape {x.shape}")
    rows = np.arange(x.data.shape[0])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _node(x.data[rows, idx], "pick_rows", (x,), grad_fn)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a matrix (duplicates allowed; backward scatters/adds)."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: expected a matrix, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], "take_rows", (x,), grad_fn)


def tile_rows(x: Tensor, count: int) -> Tensor:
    """Repeat a vector as ``count`` rows; backward sums the rows."""
    if x.data.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got shape {x.shape}")
    data = np.broadcast_to(x.data, (count, x.data.shape[0])).copy()
    return _node(data, "tile_rows", (x,), lambda g: (g.sum(axis=0),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no operands")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]}"
        ) from exc
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _node(data, "concat", parts, grad_fn)


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a vector."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("stack_scalars: no operands")
    for p in parts:
        if p.data.size != 1:
            raise ShapeError(f"stack_scalars: operand with shape {p.shape}")
    data = np.array([float(p.data) for p in parts])

    def grad_fn(g):
        return tuple(np.asarray(g[i]).reshape(p.data.shape) for i, p in enumerate(parts))

    return _node(data, "stack_scalars", parts, grad_fn)


def tsum(x: Tensor) -> Tensor:
    return _node(
        np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),)
    )


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def grad_fn(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(np.asarray(x.data.mean()), "mean", (x,), grad_fn)


def sumax(x: Tensor, axis: int) -> Tensor:
    """Sum along one axis."""
    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(x.data.sum(axis=axis), "sumax", (x,), grad_fn)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"dot: expected vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children; root is last


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` for each tensor in ``wrt``.

    Leaves that do not participate in the graph get zero gradients.  The walk
    visits each node exactly once in reverse topological order, so repeated
    calls on the same graph are bit-identical.
    """
    if output.data.size != 1:
        raise AutodiffError(
            f"backward: output must be scalar, got shape {output.shape}"
        )
    if not np.isfinite(output.data):
        raise NumericalError("backward: output is not finite")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(_toposort(output)):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    out = []
    for leaf in wrt:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
            if not np.all(np.isfinite(g)):
                raise NumericalError("backward: non-finite gradient produced")
        out.append(g)
    return out


def flatten_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def per_sample_gradients(
    samples: Sequence, loss_fn: Callable[[object], Tensor], wrt: Sequence[Tensor]
) -> np.ndarray:
    """One flat gradient row per sample, each from an independent backward pass.

    ``loss_fn(sample)`` must build a fresh scalar graph over the ``wrt``
    leaves.  K independent passes, no batched-Jacobian trick: K stays small
    here and the simple route is exact and easy to audit.
    """
    if len(samples) == 0:
        raise ValueError("per_sample_gradients: empty batch")
    rows = [flatten_arrays(backward(loss_fn(s), wrt)) for s in samples]
    return np.stack(rows)
