"""Dense tensors with reverse-mode automatic differentiation over numpy.

The graph is recorded implicitly: every operation whose inputs require
gradients produces a node that keeps references to its parent tensors and
a closure propagating the output gradient back to them.  ``backward``
replays the nodes in reverse topological order (which matches reverse
execution order) and frees the graph afterwards, so a graph can only be
backpropagated once.

Only float32 and float64 tensors exist.  Integer data (quantizer bins,
class targets) travels as plain numpy arrays and never enters the graph.
Broadcasting follows numpy's trailing-dimension alignment; gradients of
broadcast operands are summed back down to the operand shape.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_ALLOWED_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_check_finite = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for eval/generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_check_finite(flag: bool) -> None:
    """Toggle eager NaN/Inf detection on every created node (debug aid).

    Loss-producing ops check their output unconditionally; this flag extends
    the check to every intermediate, at measurable cost.
    """
    global _check_finite
    _check_finite = bool(flag)


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _ALLOWED_DTYPES:
        if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.float32)
        else:
            raise DimensionError(f"unsupported tensor dtype {arr.dtype}")
    if arr.dtype not in _ALLOWED_DTYPES:
        raise DimensionError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # ---- basic introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- graph machinery ----

    def backward(self, free_graph: bool = True) -> None:
        """Backpropagate from a scalar, filling ``.grad`` on every ancestor
        that requires gradients.  The graph is freed afterwards by default."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._backward = None
                node._parents = ()

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return tensor_sum(self) * (1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    """Create a graph node.  ``backward(g)`` must accumulate into each parent
    via ``accumulate_grad``.  Recording is skipped when gradients are globally
    disabled or no parent requires them."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a forward operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
    return out


accumulate_grad = _accumulate


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_inputs(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.dtype)
    return _as_tensor(a, b.dtype), b


# ---- pointwise and structural operations ----


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accumulate(a, _sum_to_shape(g, a.data.shape))
        _accumulate(b, _sum_to_shape(g, b.data.shape))

    return make_node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accumulate(a, _sum_to_shape(g, a.data.shape))
        _accumulate(b, _sum_to_shape(-g, b.data.shape))

    return make_node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accumulate(a, _sum_to_shape(g * b.data, a.data.shape))
        _accumulate(b, _sum_to_shape(g * a.data, b.data.shape))

    return make_node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        _accumulate(a, _sum_to_shape(g / b.data, a.data.shape))
        _accumulate(b, _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return make_node(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_inputs(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return make_node(data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return make_node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return make_node(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        # subgradient at exactly zero is taken as zero
        _accumulate(a, g * (a.data > 0.0))

    return make_node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return make_node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return make_node(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / data))

    return make_node(data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return make_node(data, (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 or g.shape != a.data.shape else g)
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return make_node(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return make_node(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return make_node(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"concat dtype mismatch: {sorted(map(str, dtypes))}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return make_node(data, tuple(tensors), backward)


def tensor_slice(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return make_node(data, (a,), backward)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (q, E) by an integer index array of any shape.

    The gradient is a scatter-add into the table, so only the rows that
    actually occur in ``indices`` receive gradient.
    """
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ContractError("embedding indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={indices.min()}, max={indices.max()}"
        )
    data = table.data[indices]

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, indices.reshape(-1), g.reshape(-1, table.shape[1]))

    return make_node(data, (table,), backward)


# ---- losses ----


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean cross-entropy in nats over rows of ``logits`` (N, q).

    ``targets`` is an (N,) integer array, ``weights`` an optional (N,) float
    array; entries with weight zero contribute nothing to value or gradient.
    The internal log-sum-exp runs in float64 and the returned scalar is
    float64 regardless of the logits dtype.  A weight sum of zero gives
    loss 0 with zero gradient.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D (N, q), got {logits.shape}")
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise ContractError("targets must be integers")
    n, q = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= q):
        raise IndexError(f"target class out of range [0, {q})")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise DimensionError(f"weights shape {weights.shape} does not match logits rows {n}")

    z = logits.data.astype(np.float64, copy=False)
    if z.size and not np.isfinite(z).all():
        raise NumericError("non-finite logits in cross-entropy")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    if weights is None:
        total = np.float64(n)
        loss = nll.sum() / total if n else np.float64(0.0)
    else:
        total = weights.sum()
        loss = (nll * weights).sum() / total if total > 0 else np.float64(0.0)
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")

    def backward(g):
        if not logits.requires_grad:
            return
        if weights is not None and total <= 0:
            return
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        if weights is not None:
            p *= (weights / total)[:, None]
        else:
            p /= total
        _accumulate(logits, (float(g) * p).astype(logits.dtype))

    return make_node(np.asarray(loss), (logits,), backward)


def cross_entropy_per_position(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Plain-numpy per-row negative log-likelihood in nats (float64)."""
    z = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - z[np.arange(n), targets]


def clip_gradients(params: Iterable[Tensor], bound: float = 1.0) -> None:
    """Hard-clip each gradient element into [-bound, bound], in place."""
    if bound <= 0:
        raise ContractError(f"clip bound must be positive, got {bound}")
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, -bound, bound, out=p.grad)
