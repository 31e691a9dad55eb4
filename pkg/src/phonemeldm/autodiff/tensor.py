"""Dense tensors with a define-by-run tape for reverse-mode differentiation.

Every primitive checks its output for NaN/Inf and raises ``NonFiniteError``.
Binary ops broadcast only over leading dims: the smaller operand's shape must
be a suffix of the larger one's.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True


_state = _State()


def get_default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _state.dtype
        self.data = _contiguous(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    return arr if arr.flags.c_contiguous else arr.copy()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _state.grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading dims")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    def bw(g):
        return (g * c,)

    return _result(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data

    def bw(g):
        return (-g * out * out,)

    return _result(out, (a,), bw, "reciprocal")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _result(out, (a,), bw, "log")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out.astype(a.dtype, copy=False), (a,), bw, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), bw, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), bw, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(0.044715) * x ** 3)
    th = np.tanh(inner)
    out = dt(0.5) * x * (1 + th)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)

    return _result(out, (a,), bw, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return _result(np.clip(a.data, lo, hi), (a,), bw, "clip")


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(a.shape, g / n, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).astype(a.dtype),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def l1_loss(a, b) -> Tensor:
    """Mean absolute error. The subgradient at a == b is 0."""
    a, b = _coerce(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _result(np.asarray(np.abs(diff).mean(), dtype=a.dtype), (a, b), bw, "l1")


def mse_loss(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return _result(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), bw, "l2")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)`` with equal leading dims."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims {a.shape[:-2]} vs {b.shape[:-2]}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    out = _softmax_np(a.data)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, without affine parameters."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (a,), bw, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(d)) v``.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv) with equal leading dims.
    """
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    dt = q.data.dtype.type
    sc = dt(1.0 / np.sqrt(q.shape[-1]))
    kt = np.swapaxes(k.data, -1, -2)
    w = _softmax_np((q.data @ kt) * sc)
    out = w @ v.data

    def bw(g):
        gv = np.swapaxes(w, -1, -2) @ g
        gw = g @ np.swapaxes(v.data, -1, -2)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * sc
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _result(out, (q, k, v), bw, "attention")


def attention_weights(q: Tensor, k: Tensor) -> np.ndarray:
    """The softmax weights ``attention`` would use; inspection only, no tape."""
    sc = 1.0 / np.sqrt(q.shape[-1])
    return _softmax_np((q.data @ np.swapaxes(k.data, -1, -2)) * sc)


# ---------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(_contiguous(np.asarray(out)), (a,), bw, "slice")


def take(table: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an integer index array (embedding lookup, repetition)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[axis]):
        raise IndexError(f"take: index out of range for axis of size {table.shape[axis]}")
    out = np.take(table.data, idx, axis=axis)

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, idx, gm)
        return (full,)

    return _result(out, (table,), bw, "embedding")


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
