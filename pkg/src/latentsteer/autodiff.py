"""Tape-based reverse-mode autodiff over dense float64 numpy arrays.

A :class:`Tape` records every primitive application in execution order, so a
single reverse sweep produces adjoints for all recorded tensors. Tapes are
cheap and meant to be rebuilt for each forward pass.

    tape = Tape()
    x = tape.leaf([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]  # array([2., 4., 6.])
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "tape", "index", "requires_grad", "__weakref__")

    def __init__(self, data: np.ndarray, tape: "Tape", index: int, requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, index={self.index}, requires_grad={self.requires_grad})"

    # operator sugar; every method routes through record_primitive
    def __add__(self, other):
        return record_primitive(self.tape, "add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return record_primitive(self.tape, "add", self, scale(_as_tensor(self.tape, other), -1.0))

    def __rsub__(self, other):
        return record_primitive(self.tape, "add", scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return record_primitive(self.tape, "mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return record_primitive(self.tape, "div", self, other)

    def __pow__(self, k):
        if k != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def __matmul__(self, other):
        return record_primitive(self.tape, "matmul", self, other)

    def __rmatmul__(self, other):
        return record_primitive(self.tape, "matmul", other, self)

    def __getitem__(self, index):
        return record_primitive(self.tape, "slice", self, index=index)

    @property
    def T(self):
        return record_primitive(self.tape, "transpose", self)

    def sum(self, axis=None, keepdims=False):
        return record_primitive(self.tape, "sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record_primitive(self.tape, "mean", self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple[int, ...], backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of primitive applications.

    Node ``i`` produces ``tensors[i]``; operands always carry smaller indices,
    so iterating nodes backwards is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, data: np.ndarray, node: _Node, requires_grad: bool) -> Tensor:
        t = Tensor(data, self, len(self.nodes), requires_grad)
        self.nodes.append(node)
        self.tensors.append(t)
        return t

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf contains non-finite values")
        return self._push(arr, _Node("leaf", (), None), requires_grad)

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def backward(self, root: Tensor, wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
        """Adjoints of the scalar ``root``.

        The result maps every leaf with ``requires_grad`` (zeros when the leaf
        does not reach ``root``) plus every tensor listed in ``wrt``, which may
        be intermediates such as attention matrices.
        """
        if not isinstance(root, Tensor) or root.tape is not self:
            raise ValueError("root is not a tensor recorded on this tape")
        if root.data.size != 1:
            raise ValueError(f"root must be scalar, got shape {root.shape}")
        wrt = list(wrt)
        for t in wrt:
            if t.tape is not self:
                raise ValueError("requested gradient for a tensor from another tape")

        adj: list[np.ndarray | None] = [None] * (root.index + 1)
        adj[root.index] = np.ones_like(root.data)
        for i in range(root.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.backward_fn is None:
                continue
            in_grads = node.backward_fn(g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None or self.nodes[j].kind == "const":
                    continue
                if adj[j] is None:
                    adj[j] = gj
                else:
                    adj[j] = adj[j] + gj

        def get(t: Tensor) -> np.ndarray:
            g = adj[t.index] if t.index <= root.index else None
            return np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape)

        out = {t: get(t) for t in self.tensors if t.requires_grad and self.nodes[t.index].kind == "leaf"}
        for t in wrt:
            out[t] = get(t)
        return out


def backward(tape: Tape, root: Tensor, wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    return tape.backward(root, wrt)


# ---------------------------------------------------------------------------
# primitives: kind -> forward(*arrays, **params) returning (out, vjp)
# where vjp(g) returns one gradient (or None) per operand.

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    return out, lambda g: (_unbroadcast(np.matmul(g, _swap(b)), a.shape),
                           _unbroadcast(np.matmul(_swap(a), g), b.shape))


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast {a.shape} with {b.shape}") from None


def _add(a, b):
    _broadcast_shape(a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _mul(a, b):
    _broadcast_shape(a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    _broadcast_shape(a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _scale(a, c: float):
    return a * c, lambda g: (g * c,)


def _square(a):
    return a * a, lambda g: (2.0 * a * g,)


def _relu(a):
    pos = a > 0
    return np.where(pos, a, 0.0), lambda g: (np.where(pos, g, 0.0),)


def _rowsoftmax(a, mask=None):
    """Softmax over the last axis; ``mask`` marks forbidden entries (exact zeros)."""
    if mask is None:
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(mask, a.shape)
        z = np.where(mask, -np.inf, a)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(mask, 0.0, np.exp(z))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _logsoftmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return out, lambda g: (g - p * g.sum(axis=-1, keepdims=True),)


def _layernorm(a, eps: float = 1e-5):
    """Normalize over the last axis (no affine part; compose with mul/add)."""
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return xhat, vjp


def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out), vjp


def _mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1) if axis is not None else a.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return np.asarray(out), vjp


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def _slice(a, index=None):
    out = a[index]
    basic = _is_basic(index)

    def vjp(g):
        full = np.zeros_like(a)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return np.array(out, dtype=DTYPE), vjp


def _concat(*arrays, axis: int = -1):
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _transpose(a):
    return _swap(a).copy(), lambda g: (_swap(g),)


def _reshape(a, shape=None):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "div": _div,
    "scale": _scale,
    "square": _square,
    "relu": _relu,
    "rowsoftmax": _rowsoftmax,
    "logsoftmax": _logsoftmax,
    "layernorm": _layernorm,
    "sum": _sum,
    "mean": _mean,
    "slice": _slice,
    "concat": _concat,
    "transpose": _transpose,
    "reshape": _reshape,
}


def _as_tensor(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    t = tape.leaf(x)
    tape.nodes[t.index].kind = "const"
    return t


def record_primitive(tape: Tape, kind: str, *operands, **params) -> Tensor:
    """Apply primitive ``kind`` to ``operands`` and record it on ``tape``.

    Non-tensor operands (numpy arrays, scalars) are recorded as constants.
    Raises ``ValueError`` on shape mismatch and :class:`NonFiniteError` when
    the result contains NaN or Inf.
    """
    try:
        fwd = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    ts = [_as_tensor(tape, x) for x in operands]
    with np.errstate(all="ignore"):  # non-finite results are reported below
        out, vjp = fwd(*(t.data for t in ts), **params)
    out = np.asarray(out, dtype=DTYPE)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    node = _Node(kind, tuple(t.index for t in ts), vjp)
    return tape._push(out, node, False)


# functional aliases
def matmul(a, b):
    return record_primitive(a.tape, "matmul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return record_primitive(a.tape, "scale", a, c=float(c))


def square(a: Tensor) -> Tensor:
    return record_primitive(a.tape, "square", a)


def relu(a: Tensor) -> Tensor:
    return record_primitive(a.tape, "relu", a)


def rowsoftmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return record_primitive(a.tape, "rowsoftmax", a, mask=mask)


def logsoftmax(a: Tensor) -> Tensor:
    return record_primitive(a.tape, "logsoftmax", a)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    return record_primitive(a.tape, "layernorm", a, eps=eps)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return record_primitive(tensors[0].tape, "concat", *tensors, axis=axis)


def reshape(a: Tensor, shape) -> Tensor:
    return record_primitive(a.tape, "reshape", a, shape=tuple(shape))


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6, coords=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives a leaf tensor on a fresh tape and returns a scalar tensor.
    ``coords`` optionally restricts the comparison to a subset of flat indices.
    The error is ``max_i |a_i - cd_i| / max(max_i |a_i|, max_i |cd_i|, 1e-12)``
    over the checked coordinates: scaling by the gradient's magnitude keeps
    near-zero components, whose central differences are pure rounding noise
    at small ``eps``, from dominating.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=DTYPE)

    def value(arr) -> float:
        tape = Tape()
        return f(tape.leaf(arr)).item()

    tape = Tape()
    leaf = tape.leaf(x, requires_grad=True)
    analytic = tape.backward(f(leaf))[leaf].reshape(-1)

    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    a, cd = [], []
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        d = (value(xp.reshape(x.shape)) - value(xm.reshape(x.shape))) / (2 * eps)
        if not np.isfinite(d):
            raise NonFiniteError("finite difference produced non-finite value")
        a.append(analytic[i])
        cd.append(d)
    a, cd = np.asarray(a), np.asarray(cd)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(cd).max(), 1e-12)
    return float(np.abs(a - cd).max() / scale)
