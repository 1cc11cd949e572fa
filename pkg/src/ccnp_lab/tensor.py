"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every forward op builds a :class:`Node` holding the op kind, its inputs and a
closure over whatever activations the backward rule needs.  Calling
:func:`backward` on a scalar orders those nodes topologically (the tape) and
walks it once in reverse.

Broadcasting is deliberately narrow.  A binary op accepts operands of equal
shape, a scalar operand (python number or shape ``()``), or an operand whose
shape is a trailing suffix of the other's ("leading-batch" broadcast, e.g.
``(n, d) + (d,)``).  Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "concat",
    "relu",
    "softplus",
    "sigmoid",
    "mean",
    "sum",
    "scale",
    "cosine_sim",
    "softmax",
    "log",
    "exp",
    "square",
    "gather_rows",
    "transpose",
    "reshape",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable node recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One tape entry: how ``output`` was produced from ``inputs``."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} initialised with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.node = None
    t.name = None
    return t


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=np.float64))


def _result(op: str, out: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{op} produced non-finite output (input shapes {shapes})")
    t = _wrap(out)
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, backward_fn)
    return t


# ---------------------------------------------------------------------------
# tape / backward


class Tape:
    """Topologically ordered nodes reachable from a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.order = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return sum(1 for t in self.order if t.node is not None)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.order if t.node is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            # leaves own their buffer: g may be a view into another grad
            t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g
            continue
        t.grad = g if t.grad is None else t.grad + g
        in_grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * out / bd, bd.shape),
        )

    return _result("div", out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result("scale", a.data * c, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra / structural ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading batch axes) or has the
    same leading batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result("matmul", np.matmul(ad, bd), (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(a.data, axes), (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {orig} to {tuple(shape)}") from exc

    def bw(g):
        return (g.reshape(orig),)

    return _result("reshape", out, (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: empty input list")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(
                f"concat: shapes {ts[0].shape} and {t.shape} disagree off axis {axis}"
            )
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) of ``a``; indices may repeat."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result("gather_rows", a.data[idx], (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = a.size if ax is None else shape[ax]

    def bw(g):
        g = g if ax is None else np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result("mean", np.asarray(a.data.mean(axis=ax)), (a,), bw)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        g = g if ax is None else np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=ax)), (a,), bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result("relu", a.data * mask, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

    def bw(g):
        return (g * _sigmoid(x),)

    return _result("softplus", out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _result("sigmoid", s, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result("exp", out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)

    def bw(g):
        return (g / x,)

    return _result("log", out, (a,), bw)


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data

    def bw(g):
        return (2.0 * g * x,)

    return _result("square", x * x, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (a,), bw)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity.

    Two vectors of shape ``(d,)`` give a scalar.  Matrices ``(n, d)`` and
    ``(m, d)`` give the ``(n, m)`` matrix of row-pair similarities.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    vector = a.ndim == 1 and b.ndim == 1
    if vector:
        ad, bd = a.data[None, :], b.data[None, :]
    elif a.ndim == 2 and b.ndim == 2:
        ad, bd = a.data, b.data
    else:
        raise ShapeError(f"cosine_sim: expected two vectors or two matrices, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-1]:
        raise ShapeError(f"cosine_sim: feature sizes differ for {a.shape} and {b.shape}")
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine_sim: zero-norm embedding")
    ah = ad / na[:, None]
    bh = bd / nb[:, None]
    sim = ah @ bh.T

    def bw(g):
        g2 = g.reshape(1, 1) if vector else g
        gs = g2 * sim
        ga = (g2 @ bh - gs.sum(axis=1)[:, None] * ah) / na[:, None]
        gb = (g2.T @ ah - gs.sum(axis=0)[:, None] * bh) / nb[:, None]
        if vector:
            return ga[0], gb[0]
        return ga, gb

    out = np.asarray(sim[0, 0]) if vector else sim
    return _result("cosine_sim", out, (a, b), bw)
