"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure producing the parents' gradient contributions.
:meth:`Tensor.backward` orders the recorded graph topologically and replays
it in reverse.

Elementwise operations never broadcast; callers tile explicitly with
:func:`broadcast_to` so shape bookkeeping stays visible.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable finiteness checks on every tensor created."""
    global _DEBUG
    _DEBUG = bool(flag)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Raised on misuse of the backward pass."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when a NaN or Inf value is produced."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value in tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all of these go through the checked functions below
    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __radd__(self, other):
        return add(_wrap(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def backward(self) -> None:
        """Populate ``grad`` on every tensor in the graph that requires it."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("backward called on a tensor with no recorded graph")
        if self._consumed:
            raise GradientError("backward already ran on this graph; rebuild it first")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._consumed = True


def _wrap(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_record(root: Tensor) -> list[tuple[str, tuple[int, ...], int]]:
    """Topologically ordered ``(op, input ids, output id)`` triples of a graph."""
    return [(n._op, tuple(id(p) for p in n._parents), id(n)) for n in _topological(root)]


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out._op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def activation(kind: str, a: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size or any(s < 0 for s in shape):
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def index(a: Tensor, key) -> Tensor:
    """``a[key]`` with any numpy key; gradients scatter-add back to the source."""
    if isinstance(key, Tensor):
        raise TypeError("index keys must be integer arrays, slices or ints")
    try:
        out = a.data[key]
    except IndexError as exc:
        raise IndexError(f"index out of range for shape {a.shape}: {exc}") from None
    basic = _is_basic(key)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64, copy=True), (a,), backward, "index")


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in keys)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries ``indices`` along ``axis`` (``np.take`` semantics)."""
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: indices outside [0, {n}) on axis {axis}")
    key = [slice(None)] * a.ndim
    key[axis] = idx
    return index(a, tuple(key))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit tiling with numpy broadcasting rules; backward sums out."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot tile {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.array(out), (a,), backward, "broadcast")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(src, float(g)),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(src) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def structural(kind: str, *args, **kwargs) -> Tensor:
    ops = {
        "reshape": reshape,
        "concat": concat,
        "gather": gather,
        "reduce_sum": reduce_sum,
        "softmax": softmax,
    }
    if kind not in ops:
        raise ValueError(f"unknown structural op {kind!r}")
    return ops[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Valid, stride-1 2D convolution of a ``(..., N, K, C_in)`` map.

    ``kernel`` has shape ``(1, K, C_in, C_out)``: its spatial extent spans
    the whole neighbour axis, so each of the ``N`` rows yields exactly one
    output position. Leading axes before ``N`` are treated as batch.
    """
    if kernel.ndim != 4 or kernel.shape[0] != 1:
        raise DimensionError(f"conv2d: kernel must be (1, K, C_in, C_out), got {kernel.shape}")
    if x.ndim < 3 or x.shape[-2:] != kernel.shape[1:3]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    k, cin, cout = kernel.shape[1:]
    lead = x.shape[:-2]
    xf = x.data.reshape(-1, k * cin)
    wf = kernel.data.reshape(k * cin, cout)
    out = (xf @ wf).reshape(lead + (1, cout))

    def backward(g):
        gf = g.reshape(-1, cout)
        gx = (gf @ wf.T).reshape(x.shape)
        gw = (xf.T @ gf).reshape(kernel.shape)
        return gx, gw

    return _make(out, (x, kernel), backward, "conv2d")
