"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A forward pass run inside ``with Tape() as tape:`` records every primitive
applied to tracked tensors. ``tape.backward(root)`` then walks the tape in
reverse and returns exact gradients keyed by node id.

Outside of an active tape, operations simply compute values; this is the
fast path used for evaluation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate a primitive's shape rule."""


class DomainError(ValueError):
    """Operand values lie outside a primitive's mathematical domain."""


class ContractError(RuntimeError):
    """A caller broke an API precondition (e.g. non-scalar backward root)."""


_state = threading.local()


def active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """Dense n-d array with an optional attachment to a computation tape.

    ``data`` is always a C-contiguous float64 ndarray. ``node_id`` is set for
    tensors produced by a recorded operation; leaves (parameters, inputs)
    get their node ids from the tape that first sees them.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        t.name = None
        return t

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(x.data))


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray], Sequence[Optional[np.ndarray]]]


_PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(kind: str, forward, backward) -> Primitive:
    """Register a differentiable op.

    ``forward(*arrays, **attrs)`` returns ``(out, ctx)``;
    ``backward(ctx, grad_out)`` returns one gradient (or None) per input.
    """
    prim = Primitive(kind, forward, backward)
    _PRIMITIVES[kind] = prim
    return prim


def primitive(kind: str) -> Primitive:
    return _PRIMITIVES[kind]


@dataclass
class Node:
    kind: str
    inputs: tuple[Optional[int], ...]
    ctx: Any
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of one forward pass.

    Nodes are topologically ordered by construction: an op can only
    reference tensors that already exist.
    """

    nodes: list[Node] = field(default_factory=list)
    _leaf_ids: dict[int, int] = field(default_factory=dict)
    _leaves: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def _record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def watch(self, t: Tensor) -> int:
        """Return the node id of ``t`` on this tape, adding a leaf if needed."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = self._record(Node("leaf", (), None, t.shape))
            self._leaf_ids[key] = nid
            self._leaves.append(t)
        return nid

    def node_id(self, t: Tensor) -> Optional[int]:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def backward(self, root: Tensor) -> dict[int, Tensor]:
        """Gradients of scalar ``root`` w.r.t. every node it depends on."""
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        rid = self.node_id(root)
        if rid is None:
            raise ContractError("backward root was not produced on this tape")
        grads: dict[int, np.ndarray] = {rid: np.ones(root.shape)}
        for nid in range(rid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind == "leaf":
                continue
            in_grads = _PRIMITIVES[node.kind].backward(node.ctx, g)
            for src, ig in zip(node.inputs, in_grads):
                if src is None or ig is None:
                    continue
                prev = grads.get(src)
                grads[src] = ig if prev is None else prev + ig
        return {k: Tensor._wrap(v) for k, v in grads.items()}

    def grad(self, grads: dict[int, Tensor], t: Tensor) -> Optional[Tensor]:
        nid = self.node_id(t)
        return None if nid is None else grads.get(nid)


def apply_primitive(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    prim = _PRIMITIVES.get(kind)
    if prim is None:
        raise KeyError(f"unknown primitive {kind!r}")
    out, ctx = prim.forward(*(t.data for t in inputs), **attrs)
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is None:
        return result
    tracked = [t.requires_grad or t._tape is tape for t in inputs]
    if not any(tracked):
        return result
    ids = tuple(tape.watch(t) if tr else None for t, tr in zip(inputs, tracked))
    result.node_id = tape._record(Node(kind, ids, ctx, out.shape))
    result._tape = tape
    result.requires_grad = True
    return result


# ---------------------------------------------------------------------------
# shape helpers


def _check_trailing(kind: str, a: tuple, b: tuple) -> None:
    """Operands must match, one must be a suffix of the other, or one is a 1-element scalar."""
    if a == b or a == (1,) or b == (1,):
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{kind}: shapes {a} and {b} are not trailing-broadcast compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1,):
        return np.array([g.sum()])
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.reshape((-1,) + shape).sum(axis=0) if shape else g.sum()
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# core primitives


def _add_fwd(a, b):
    _check_trailing("add", a.shape, b.shape)
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _check_trailing("sub", a.shape, b.shape)
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_fwd(a, b):
    _check_trailing("mul", a.shape, b.shape)
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")
    return np.matmul(a, b), (a, b)


def _matmul_bwd(ctx, g):
    a, b = ctx
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


def _transpose_fwd(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.ascontiguousarray(np.transpose(a, axes)), axes


def _transpose_bwd(axes, g):
    return (np.ascontiguousarray(np.transpose(g, np.argsort(axes))),)


def _reshape_fwd(a, shape):
    shape = tuple(shape)
    try:
        out = a.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return out, a.shape


def _reshape_bwd(shape, g):
    return (g.reshape(shape),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _sum_fwd(a, axis=None, keepdims=False):
    ax = _norm_axis(axis, a.ndim)
    out = a.sum(axis=ax, keepdims=keepdims)
    return np.asarray(out, dtype=np.float64).reshape(out.shape or (1,)), (a.shape, ax, keepdims)


def _sum_bwd(ctx, g):
    shape, ax, keepdims = ctx
    if not keepdims:
        kshape = tuple(1 if i in ax else s for i, s in enumerate(shape))
        g = g.reshape(kshape)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(a, axis=None, keepdims=False):
    ax = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax]))
    out = a.mean(axis=ax, keepdims=keepdims)
    return np.asarray(out, dtype=np.float64).reshape(out.shape or (1,)), (a.shape, ax, keepdims, count)


def _mean_bwd(ctx, g):
    shape, ax, keepdims, count = ctx
    if not keepdims:
        g = g.reshape(tuple(1 if i in ax else s for i, s in enumerate(shape)))
    return (np.broadcast_to(g / count, shape).copy(),)


def _max_fwd(a, axis=-1, keepdims=False):
    axis = axis % a.ndim
    idx = np.argmax(a, axis=axis)  # first occurrence: lowest index wins ties
    out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    out = out.reshape(out.shape or (1,))
    return out, (a.shape, axis, idx, keepdims)


def _max_bwd(ctx, g):
    shape, axis, idx, keepdims = ctx
    ga = np.zeros(shape)
    g = g.reshape(idx.shape) if not keepdims else np.squeeze(g, axis=axis)
    np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (ga,)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_bwd(out, g):
    return (g * out,)


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError(f"log: operand has {int(np.sum(a <= 0))} non-positive entries")
    return np.log(a), a


def _log_bwd(a, g):
    return (g / a,)


def _power_fwd(a, p):
    p = float(p)
    if p != int(p) and np.any(a < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    if p < 0 and np.any(a == 0):
        raise DomainError(f"power: zero base with negative exponent {p}")
    return np.power(a, p), (a, p)


def _power_bwd(ctx, g):
    a, p = ctx
    return (g * p * np.power(a, p - 1.0),)


def _broadcast_fwd(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from exc
    return out, a.shape


def _broadcast_bwd(src_shape, g):
    lead = g.ndim - len(src_shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    ax = tuple(i for i, s in enumerate(src_shape) if s == 1 and g.shape[i] != 1)
    if ax:
        g = g.sum(axis=ax, keepdims=True)
    return (g,)


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("mul", _mul_fwd, _mul_bwd)
register_primitive("matmul", _matmul_fwd, _matmul_bwd)
register_primitive("transpose", _transpose_fwd, _transpose_bwd)
register_primitive("reshape", _reshape_fwd, _reshape_bwd)
register_primitive("sum", _sum_fwd, _sum_bwd)
register_primitive("mean", _mean_fwd, _mean_bwd)
register_primitive("max", _max_fwd, _max_bwd)
register_primitive("exp", _exp_fwd, _exp_bwd)
register_primitive("log", _log_fwd, _log_bwd)
register_primitive("power", _power_fwd, _power_bwd)
register_primitive("broadcast", _broadcast_fwd, _broadcast_bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", a, b)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", a, axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", a, shape=tuple(shape))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", a, axis=axis, keepdims=keepdims)


def max(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive("max", a, axis=axis, keepdims=keepdims)


def exp(a: Tensor) -> Tensor:
    return apply_primitive("exp", a)


def log(a: Tensor) -> Tensor:
    return apply_primitive("log", a)


def power(a: Tensor, p: float) -> Tensor:
    return apply_primitive("power", a, p=p)


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("broadcast", a, shape=tuple(shape))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    The relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``, so
    coordinates with near-zero gradients are judged on absolute error.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(x)
        if out.size != 1:
            raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        grads = tape.backward(out)
    g = tape.grad(grads, x)
    analytic = np.zeros_like(base) if g is None else g.data.copy()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(base.shape))).item()
        fm = f(Tensor(xm.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    return GradCheckReport(err, err <= rel_tol, analytic, numeric)
