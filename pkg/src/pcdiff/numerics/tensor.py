"""Dense tensors with a dynamic reverse-mode tape.

Every op returns a new :class:`Tensor`.  When any input requires a gradient the
result keeps references to its parents and a closure that maps the output
gradient onto the parents; :meth:`Tensor.backward` walks that graph in reverse
topological order and then drops it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

_DTYPE = np.float32
_KINKS: list | None = None
_REPLAY: Iterator | None = None
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the branch pattern (relu signs, max winners) of every forward op.

    Two evaluations with equal logs took the same piecewise-smooth branch, so a
    central difference between them is a valid derivative estimate.
    """
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


@contextlib.contextmanager
def replay_kinks(log: list) -> Iterator[None]:
    """Force relu and max ops onto the branches stored in ``log`` (from ``record_kinks``).

    Evaluates the smooth piece that is active at the recorded point, extended
    past its boundary, so finite differences near a kink stay meaningful.
    """
    global _REPLAY
    prev, _REPLAY = _REPLAY, iter(log)
    try:
        yield
    finally:
        _REPLAY = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Forward ops inside the block record nothing on the tape."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, cols):
        raise TypeError("use slice_last / gather for indexing")

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None


def _topo_order(root: Tensor) -> list[Tensor]:
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
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-np.clip(x.data, -80, 80)))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    if _REPLAY is not None:
        mask = np.unpackbits(next(_REPLAY), count=x.data.size).reshape(x.shape).astype(bool)
    else:
        mask = x.data > 0
    if _KINKS is not None:
        _KINKS.append(np.packbits(mask))
    return _result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), back)


# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; leading dims of ``a`` are batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result("reshape", y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _result("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            p != q for i, (p, q) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return np.split(g, cuts, axis=axis)

    return _result("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    if not 0 <= start <= stop <= x.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _result("slice_last", x.data[..., start:stop].copy(), (x,), back)


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[-1]:
        raise ShapeError(f"split_last: sizes {list(sizes)} do not cover {x.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_last(x, start, start + n))
        start += n
    return out


# reductions


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal entry."""
    arg = next(_REPLAY) if _REPLAY is not None else np.argmax(x.data, axis=axis)
    if _KINKS is not None:
        _KINKS.append(arg.copy())
    y = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _result("max_pool", np.squeeze(y, axis=axis), (x,), back)


def mean_pool(x: Tensor, axis: int) -> Tensor:
    return mean(x, axis=axis)


# indexing


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    flat = idx.reshape(-1)
    vals = values.reshape(flat.size, -1)
    s = sp.csr_matrix(
        (np.ones(flat.size, dtype=vals.dtype), (flat, np.arange(flat.size))),
        shape=(n, flat.size),
    )
    return np.asarray(s @ vals).reshape((n,) + values.shape[idx.ndim:])


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` picked by an integer array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")
    return _result("gather", x.data[idx], (x,), lambda g: (_scatter_rows(idx, g, n),))


def scatter_add(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """``out[idx[i]] += x[i]`` into ``n`` zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[: idx.ndim]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} vs values {x.shape}")
    return _result("scatter_add", _scatter_rows(idx, x.data, n), (x,), lambda g: (g[idx],))


def weighted_rows(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[j] = sum_i weights[j, i] * x[idx[j, i]]`` with constant weights."""
    w = np.asarray(weights, dtype=_DTYPE)[..., None]
    return sum(mul(gather(x, idx), w), axis=1)
