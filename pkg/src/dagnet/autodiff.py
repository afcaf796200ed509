"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations performed inside an active :class:`Tape` context are recorded in
execution order; :func:`backward` replays them in reverse. Outside a tape,
operations produce plain values and nothing is recorded.

Forward matrix products go through ``np.einsum`` with ``optimize=False``
rather than BLAS, because the BLAS kernels do not give bitwise-identical rows
when the rows of the left operand are permuted. Backward passes use BLAS.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "backward",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "elu",
    "clip",
    "softmax",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "custom_op",
    "set_debug",
    "gradcheck",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_DEBUG = os.environ.get("DAGNET_DEBUG", "") not in ("", "0")
_state = threading.local()


def set_debug(flag: bool) -> None:
    """In debug mode every op raises FloatingPointError on non-finite output."""
    global _DEBUG
    _DEBUG = bool(flag)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and the innermost one
    receives the recordings.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward called on an empty tape")
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss has no recorded history (was it computed inside a Tape?)")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable, name: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str = "custom") -> Tensor:
    """Register a fused primitive.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    array (or None) per input, in order.
    """
    return _make(data, tuple(inputs), backward_fn, name)


# --- binary elementwise -------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"scalar_{side}":
        return np.asarray(g.sum())
    if kind == f"row_{side}":
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "add")

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "sub")

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(-g, kind, "b")

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "mul")

    def bw(g):
        return _reduce_to(g * b.data, kind, "a"), _reduce_to(g * a.data, kind, "b")

    return _make(a.data * b.data, (a, b), bw, "mul")


# --- unary elementwise --------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    slope = np.where(pos, 1.0, neg_part + alpha)
    return _make(out, (a,), lambda g: (g * slope,), "elu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where clamping was active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --- linear algebra -----------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(_mm(a.data, b.data), (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x [batch, in], weight [out, in], bias [out]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = np.einsum("ij,kj->ik", x.data, weight.data, optimize=False)
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ weight.data, g.T @ x.data), "linear")
    bias = _as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out += bias.data

    def bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw, "linear")


# --- reductions & reshaping --------------------------------------------

def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        shape = a.shape
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _make(a.data.sum(axis=ax), (a,), bw, "sum")


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if np.shares_memory(out, a.data):
        out = out.copy()

    items = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in items)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[d] != ts[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# --- numerical gradient check ------------------------------------------

def gradcheck(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Largest componentwise relative error between tape and central differences.

    ``fn`` rebuilds the scalar loss from the current parameter values. The
    relative error of a component is ``|a - n| / max(|a|, |n|, floor)``.

    A central difference cannot resolve derivatives much below
    ``eps * |loss| / step`` (cancellation in ``up - down``), so the floor is
    raised to ``1e4`` times that level; such components are effectively
    compared absolutely. For losses of order one this stays under the default
    ``1e-6`` and changes nothing.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = fn()
    backward(loss)
    floor = max(floor, 1e4 * np.finfo(np.float64).eps * abs(loss.item()) / step)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            ai = a.reshape(-1)[i]
            err = abs(ai - numeric) / max(abs(ai), abs(numeric), floor)
            worst = max(worst, err)
    return worst
