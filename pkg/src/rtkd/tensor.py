"""Dense tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation that receives at least one
``requires_grad`` input records a backward closure and its parent tensors on
the output. ``Tensor.backward()`` topologically sorts that implicit graph and
runs the closures in reverse, accumulating (``+=``) into ``.grad`` of every
reachable tensor that requires gradients. Interior nodes are single-use:
running backward twice through the same forward graph raises
:class:`~rtkd.errors.GraphUsageError`, while leaf tensors (parameters) keep
accumulating across independent graphs.

Storage is a numpy array. float32 is the training default; gradient-check
tests build float64 tensors explicitly for headroom.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, GraphUsageError

DEFAULT_DTYPE = np.float32

Number = Union[int, float]


class Tensor:
    """N-dimensional real array, optionally tracked by the autograd graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple[Tensor, ...] = ()
        self._spent = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through everything that produced it."""
        if self.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node._backward is not None and node._spent:
                raise GraphUsageError("backward() was already run through part of this graph")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                self._deposit(node, g)
            if node._backward is not None:
                node._spent = True
                node._backward_dispatch(g, grads)

    def _backward_dispatch(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        parent_grads = self._backward(g)
        for p, pg in zip(self._parents, parent_grads):
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = pg

    @staticmethod
    def _deposit(node: "Tensor", g: np.ndarray) -> None:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a number")
        return mul(self, _coerce(1.0 / float(other), self))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms of the common primitives
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter:
    """A trainable tensor plus its SGD momentum buffer and a name path."""

    __slots__ = ("tensor", "momentum_buffer", "name", "weight_decay")

    def __init__(self, data, name: str, weight_decay: bool = True, dtype=None):
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype or DEFAULT_DTYPE)
        self.momentum_buffer = np.zeros_like(self.tensor.data)
        self.name = name
        self.weight_decay = weight_decay  # harness skips decay on norm/positional params

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape})"


# -- construction helpers ----------------------------------------------------


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False  # interior node; grads flow through, not into
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape, dtype=np.int64)) == 1 else g


# -- elementwise and linear algebra -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    _broadcast_pair(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    _broadcast_pair(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    _broadcast_pair(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_same_dtype(a, b, "matmul")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: ``x [N×i] @ w [i×o] + b [o]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match output width {w.shape[1]}")
    _check_same_dtype(x, w, "linear")
    out = x.data @ w.data + b.data
    x_data, w_data = x.data, w.data

    def backward(g):
        return g @ w_data.T, x_data.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 is 0

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    x_data = x.data

    def backward(g):
        return (g / x_data,)

    return _make(out, (x,), backward)


# -- reductions ----------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % ndim for a in axis)
    for a in axis:
        if not 0 <= a < ndim:
            raise DimensionError(f"axis {a} out of range for ndim {ndim}")
    return axis


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _normalize_axis(axis, x.ndim)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _make(np.asarray(out), (x,), backward)


# -- shape surgery --------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes_t = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = x.data.transpose(axes_t)
    inverse = tuple(np.argsort(axes_t))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def entry(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Extract one element as a 0-d tensor; gradient flows into that slot."""
    index = tuple(int(i) for i in index)
    if len(index) != x.ndim:
        raise DimensionError(f"entry: index {index} does not address shape {x.shape}")
    out = np.asarray(x.data[index])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _make(out, (x,), backward)


# -- normalized maps -------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis``; slices sum to 1."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logsum

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def l2_norm(x: Tensor, axis: int) -> Tensor:
    """Euclidean norm along ``axis`` (axis removed). Subgradient at 0 is 0."""
    axis = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=axis))
    x_data = x.data

    def backward(g):
        n = np.expand_dims(norm, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * x_data / safe * (n > 0),)

    return _make(norm, (x,), backward)


def l2_normalize(x: Tensor, axis: int) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm; zero slices stay zero."""
    axis = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = x.data / safe * (norm > 0)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / safe * (norm > 0),)

    return _make(out, (x,), backward)
