"""Reverse-mode automatic differentiation over dense n-dimensional arrays.

Values are stored as 32-bit floats by default (64-bit tensors are supported
so verification oracles can re-evaluate a function at higher precision).
Reductions (matmul, sums, means, normalization statistics) accumulate at
64-bit internally and round once on output, which keeps results within one
rounding step of an exact reference and makes runs bit-reproducible: numpy
evaluates every primitive with a fixed loop order.

Building blocks record themselves on an implicit tape (parent links plus a
vector-Jacobian callback per node). ``backward`` walks the tape from a
scalar root and returns a :class:`GradTape` holding one gradient per
reachable tracked tensor.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "take_along",
    "narrow",
    "sum_",
    "mean_",
    "pow_const",
    "softmax",
    "layer_norm",
    "gelu",
    "cosine_sim",
    "backward",
    "finite_diff_grad",
]

_node_counter = 0


def _next_node_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    """Immutable dense array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = _next_node_id() if requires_grad else None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        data = np.asarray(data)
        _check_finite(data, op)
        tracked = any(p.requires_grad for p in parents)
        out = cls.__new__(cls)
        if not data.flags.owndata and data.base is not None:
            data = data.copy()
        data.flags.writeable = False
        out.data = data
        out.requires_grad = tracked
        out.node_id = _next_node_id() if tracked else None
        out._parents = tuple(parents) if tracked else ()
        out._vjp = vjp if tracked else None
        return out

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.node_id = None
        out._parents = ()
        out._vjp = None
        return out

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _acc_matmul(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # 64-bit accumulation, single rounding to the storage dtype
    prod = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return prod.astype(out_dtype)


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    da, db = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * db, a.shape), _unbroadcast(g * da, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def vjp(g):
        return (g * g.dtype.type(c),)

    return Tensor._from_op(out, (a,), vjp, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        out = _acc_matmul(a.data, b.data, np.result_type(a.data, b.data))
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast")
    da, db = a.data, b.data

    def vjp(g):
        ga = _acc_matmul(g, db.swapaxes(-1, -2), g.dtype)
        gb = _acc_matmul(da.swapaxes(-1, -2), g, g.dtype)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    out = np.transpose(a.data, perm).copy()
    inv = np.argsort(perm)

    def vjp(g):
        return (np.transpose(g, inv).copy(),)

    return Tensor._from_op(out, (a,), vjp, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    new_shape = tuple(shape)
    try:
        out = a.data.reshape(new_shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {new_shape}")
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return Tensor._from_op(out, (a,), vjp, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % t.ndim and t.shape[i] != ref[i] for i in range(t.ndim)
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(piece.copy() for piece in np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), vjp, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ContractError(f"take: index out of range for axis {axis} of {a.shape}")
    out = np.take(a.data, idx, axis=axis)
    in_shape = a.shape

    def vjp(g):
        grad = np.zeros(in_shape, dtype=g.dtype)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return Tensor._from_op(out, (a,), vjp, "take")


def take_along(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Batched gather: numpy take_along_axis semantics, differentiable in `a`."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ContractError(f"take_along: index out of range for axis {axis} of {a.shape}")
    out = np.take_along_axis(a.data, idx, axis=axis).copy()
    in_shape = a.shape

    def vjp(g):
        grad = np.zeros(in_shape, dtype=g.dtype)
        expanded = np.broadcast_to(idx, g.shape)
        mesh = list(np.indices(g.shape, sparse=False))
        mesh[axis] = expanded
        np.add.at(grad, tuple(mesh), g)
        return (grad,)

    return Tensor._from_op(out, (a,), vjp, "take_along")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ContractError(f"narrow: window [{start}, {start + length}) outside axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out = a.data[tuple(sl)].copy()
    in_shape = a.shape

    def vjp(g):
        grad = np.zeros(in_shape, dtype=g.dtype)
        view = np.moveaxis(grad, axis, 0)
        view[start : start + length] = np.moveaxis(g, axis, 0)
        return (grad,)

    return Tensor._from_op(out, (a,), vjp, "narrow")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(g.dtype).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return Tensor._from_op(out, (a,), vjp, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = np.power(a.data, a.data.dtype.type(p))
    da = a.data

    def vjp(g):
        return (g * p * np.power(da, g.dtype.type(p - 1.0)),)

    return Tensor._from_op(out, (a,), vjp, "pow")


# ---------------------------------------------------------------------------
# fused neural-network primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax: axis {axis} invalid for shape {a.shape}")
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(a.data.dtype)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (s * (g - inner),)

    return Tensor._from_op(s, (a,), vjp, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat64 = (x - mu) * invstd
    xhat = xhat64.astype(a.data.dtype)
    out = (xhat * gamma.data + beta.data).astype(a.data.dtype)
    gdata = gamma.data

    def vjp(g):
        axes = tuple(range(g.ndim - 1))
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(g.dtype)
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(g.dtype)
        dxhat = (g * gdata).astype(np.float64)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat64).mean(axis=-1, keepdims=True)
        dx = invstd * (dxhat - m1 - xhat64 * m2)
        return dx.astype(g.dtype), dgamma, dbeta

    return Tensor._from_op(out, (a, gamma, beta), vjp, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data.astype(np.float64)
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(a.data.dtype)

    def vjp(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
        return ((g.astype(np.float64) * dx).astype(g.dtype),)

    return Tensor._from_op(out, (a,), vjp, "gelu")


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; rejects (near-)zero-norm input."""
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"cosine_sim: expected vectors, got {u.shape} and {v.shape}")
    if u.shape != v.shape:
        raise ShapeError(f"cosine_sim: length mismatch {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u.data.astype(np.float64)))
    nv = float(np.linalg.norm(v.data.astype(np.float64)))
    if nu <= 1e-12 or nv <= 1e-12:
        raise DegenerateInputError("cosine_sim: zero-norm input vector")
    uu = reshape(u, (1, u.size))
    vv = reshape(v, (v.size, 1))
    dot = reshape(matmul(uu, vv), ())
    inv_u = pow_const(reshape(matmul(uu, transpose(uu)), ()), -0.5)
    inv_v = pow_const(reshape(matmul(transpose(vv), vv), ()), -0.5)
    return mul(mul(dot, inv_u), inv_v)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


class GradTape:
    """Result of one backward pass: topologically ordered nodes and their grads."""

    def __init__(self, nodes: Sequence[Tensor], grads: dict):
        self.nodes = list(nodes)
        self._grads = grads

    def grad(self, t: Tensor) -> Optional[Tensor]:
        arr = self._grads.get(t.node_id)
        if arr is None:
            return None
        out = Tensor.__new__(Tensor)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.node_id = None
        out._parents = ()
        out._vjp = None
        return out


def backward(loss: Tensor) -> GradTape:
    """Reverse-accumulate gradients of a scalar onto every tracked tensor."""
    if loss.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: root is not connected to any tracked tensor")

    order: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if node.node_id in seen:
            continue
        if expanded:
            seen.add(node.node_id)
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones(loss.shape, dtype=loss.data.dtype)
    }
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise NumericalError(
                    f"backward: gradient shape {pg.shape} does not match value shape {parent.shape}"
                )
            acc = grads.get(parent.node_id)
            if acc is None:
                grads[parent.node_id] = pg.copy() if pg.base is not None else pg
            else:
                grads[parent.node_id] = acc + pg
    return GradTape(order, grads)


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of a pure scalar function, evaluated at 64-bit.

    The function is re-evaluated on float64 copies of `x`, so the estimate is
    independent of the reverse-mode path it is used to check.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    base = x.data.astype(np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = f(Tensor(bumped.reshape(base.shape), dtype=np.float64)).item()
        bumped[i] = flat[i] - h
        lo = f(Tensor(bumped.reshape(base.shape), dtype=np.float64)).item()
        grad[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad.reshape(base.shape), dtype=np.float64)
