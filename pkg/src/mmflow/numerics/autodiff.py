"""Reverse-mode differentiable arrays on top of numpy.

Every operation checks its inputs, computes the forward value eagerly and,
when a :class:`Tape` is active and some input requires a gradient, appends a
node holding a closure that maps the output gradient to input gradients.
``backward`` replays the tape once in reverse.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from mmflow.errors import ContractError, DTypeError, ShapeError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_active_tape: "Tape | None" = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Recording context for one forward/backward step.

    Use as ``with Tape() as tape: loss = f(...); backward(loss)``.
    Tapes do not nest.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _active_tape


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _check(x, kind: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"{kind}: expected Tensor, got {type(x).__name__}")
    return x


def _same_dtype(kind: str, *xs: Tensor) -> None:
    d0 = xs[0].dtype
    for x in xs[1:]:
        if x.dtype != d0:
            raise DTypeError(f"{kind}: dtype mismatch {d0} vs {x.dtype}")


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    tape = _active_tape
    if tape is not None and not tape.consumed and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(kind, inputs, out, backward)
        out.node = node
        tape.nodes.append(node)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a, "add"), _check(b, "add")
    _same_dtype("add", a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a, "sub"), _check(b, "sub")
    _same_dtype("sub", a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a, "mul"), _check(b, "mul")
    _same_dtype("mul", a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _make("mul", ad * bd, (a, b), back)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    _check(x, "scalar_mul")
    s = float(s)
    return _make("scalar_mul", x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),))


def square(x: Tensor) -> Tensor:
    _check(x, "square")
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    _check(x, "sqrt")
    y = np.sqrt(x.data)
    return _make("sqrt", y, (x,), lambda g: (g / (2 * y),))


def silu(x: Tensor) -> Tensor:
    _check(x, "silu")
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _make("silu", xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),))


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check(x, "sum")
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def back(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)
    return _make("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check(x, "mean")
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    inv = x.dtype.type(1.0 / count)

    def back(g):
        return (np.broadcast_to(g.reshape(kept) * inv, shape).copy(),)
    return _make("mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), back)


# ------------------------------------------------------------------ structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a, "matmul"), _check(b, "matmul")
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _make("matmul", ad @ bd, (a, b), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    _check(x, "reshape")
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", y, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    _check(x, "transpose")
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"transpose: permutation {perm} invalid for shape {x.shape}")
    inv = tuple(np.argsort(perm))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(perm)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(_check(x, "concat") for x in xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    _same_dtype("concat", *xs)
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {ax}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     if xs[i].requires_grad else None for i in range(len(xs)))
    return _make("concat", np.concatenate([x.data for x in xs], axis=ax), xs, back)


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    _check(x, "slice")
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis {ax} of shape {x.shape}")
    idx = tuple(np.s_[start:stop] if i == ax else np.s_[:] for i in range(x.ndim))
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)
    return _make("slice", np.ascontiguousarray(x.data[idx]), (x,), back)


def embedding_lookup(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer index array (any shape)."""
    _check(table, "embedding_lookup")
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("embedding_lookup: index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _make("embedding_lookup", table.data[idx], (table,), back)


# ------------------------------------------------------------ normalisation

def softmax(x: Tensor) -> Tensor:
    _check(x, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make("softmax", y, (x,), back)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm over the last axis without affine parameters."""
    _check(x, "layer_norm")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _make("layer_norm", xhat, (x,), back)


def rotary_rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent channel pairs ``(x[2i], x[2i+1])`` by per-position angles.

    ``cos``/``sin`` broadcast against ``x.shape[:-1] + (x.shape[-1] // 2,)``.
    """
    _check(x, "rotary_rotate_pairs")
    if x.shape[-1] % 2:
        raise ShapeError(f"rotary_rotate_pairs: last axis of {x.shape} is odd")
    cos = np.asarray(cos, dtype=x.dtype)
    sin = np.asarray(sin, dtype=x.dtype)
    half = x.shape[:-1] + (x.shape[-1] // 2,)
    try:
        np.broadcast_shapes(half, cos.shape, sin.shape)
    except ValueError:
        raise ShapeError(f"rotary_rotate_pairs: angle table {cos.shape} vs pairs {half}") from None
    shape = x.shape
    xp = x.data.reshape(half + (2,))
    x0, x1 = xp[..., 0], xp[..., 1]
    y = np.empty_like(xp)
    y[..., 0] = x0 * cos - x1 * sin
    y[..., 1] = x0 * sin + x1 * cos

    def back(g):
        gp = g.reshape(half + (2,))
        g0, g1 = gp[..., 0], gp[..., 1]
        gx = np.empty_like(gp)
        gx[..., 0] = g0 * cos + g1 * sin
        gx[..., 1] = g1 * cos - g0 * sin
        return (gx.reshape(shape),)
    return _make("rotary_rotate_pairs", y.reshape(shape), (x,), back)


# -------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and consume the tape."""
    tape = _active_tape
    if tape is None or tape.consumed:
        raise ContractError("backward requires an active, unconsumed tape")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        tape.consumed = True
        tape.nodes.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.nodes.clear()


def no_grad_copy(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
