"""Reverse- and forward-mode differentiation on a lightweight vector tape.

Operations are recorded at array granularity (elementwise maps, matrix
products, reductions), not per scalar. Adjoints and tangents are built out
of the same primitives, so gradients are themselves differentiable: a
reverse pass can be re-traversed by a forward (tangent) pass, which is how
Hessian traces are obtained.

All values are float64. Kinked primitives (``absolute``, ``relu``,
``clip``) use the derivative 0 on their measure-zero kink sets.
"""

from __future__ import annotations

import gc as _gc
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape", "Node", "DualVector", "active_tape", "constant", "leaf",
    "add", "sub", "mul", "div", "neg", "matmul", "dot", "transpose",
    "reshape", "vsum", "tanh", "exp", "log", "sqrt", "absolute", "relu",
    "softplus", "sigmoid", "softmax", "clip", "concat_cols", "getcols",
    "diagonal", "diag_embed", "broadcast_to", "sum_to", "linearized",
    "concat_rows", "getrows", "padrows", "pairwise_sqdist",
    "backward", "grad", "jvp", "directional_derivative", "dual_eval",
]

def _tune_allocator() -> None:
    # Recorded graphs hold hundreds of ~128 KiB kernel matrices alive at
    # once; glibc's default mmap threshold sits exactly there and turns
    # every such allocation into an mmap/munmap pair. Raising it lets the
    # arena recycle buffers across iterations.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 32 * 1024 * 1024)  # M_MMAP_THRESHOLD
    except Exception:
        pass


_tune_allocator()

_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of primitive operations.

    Creation order is a topological order of the graph, so a backward pass
    visits nodes exactly once in reverse and a forward (tangent) pass once
    in order. A tape is single-writer; independent tapes may be used on
    different threads.

    While any tape is active the cyclic garbage collector is paused: the
    recorded graph is acyclic and reference counting reclaims it, whereas
    generational scans of a large live tape are quadratic overhead.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._gc_was_enabled = False

    def __len__(self) -> int:
        return len(self.nodes)

    def mark(self) -> int:
        """Current length, usable as the start of a region."""
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._gc_was_enabled = not _TAPE_STACK and _gc.isenabled()
        if self._gc_was_enabled:
            _gc.disable()
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        if self._gc_was_enabled:
            _gc.enable()
        return False


class Node:
    """One recorded value. ``op is None`` marks a leaf or constant."""

    __slots__ = ("value", "op", "parents", "aux", "index")

    def __init__(self, value, op, parents=(), aux=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.aux = aux
        tape = active_tape()
        if tape is None:
            self.index = -1
        else:
            self.index = len(tape.nodes)
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


@dataclass
class DualVector:
    """Value paired with its directional derivative along a seed direction."""

    value: np.ndarray
    tangent: np.ndarray


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def constant(x) -> Node:
    """Wrap a value that carries no gradient."""
    if isinstance(x, Node):
        return x
    return Node(_asarray(x), None)


def leaf(x) -> Node:
    """Wrap a differentiable input (parameter or state)."""
    return Node(_asarray(x), None)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# primitive registry

_VJP: dict[str, Callable] = {}
_JVP: dict[str, Callable] = {}


def _sum_to_value(v: np.ndarray, shape: tuple) -> np.ndarray:
    extra = v.ndim - len(shape)
    if extra > 0:
        v = v.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(v.shape, shape)) if b == 1 and a != 1)
    if axes:
        v = v.sum(axis=axes, keepdims=True)
    return v


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(a.value + b.value, "add", (a, b))


def _add_vjp(node, g):
    a, b = node.parents
    return sum_to(g, a.shape), sum_to(g, b.shape)


def _add_jvp(node, tans):
    ta, tb = tans
    if ta is None:
        return broadcast_to(tb, node.shape)
    if tb is None:
        return broadcast_to(ta, node.shape)
    return add(ta, tb)


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(a.value - b.value, "sub", (a, b))


def _sub_vjp(node, g):
    a, b = node.parents
    return sum_to(g, a.shape), neg(sum_to(g, b.shape))


def _sub_jvp(node, tans):
    ta, tb = tans
    if ta is None:
        return broadcast_to(neg(tb), node.shape)
    if tb is None:
        return broadcast_to(ta, node.shape)
    return sub(ta, tb)


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(a.value * b.value, "mul", (a, b))


def _mul_vjp(node, g):
    a, b = node.parents
    return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)


def _mul_jvp(node, tans):
    a, b = node.parents
    ta, tb = tans
    out = None
    if ta is not None:
        out = mul(ta, b)
    if tb is not None:
        out = mul(a, tb) if out is None else add(out, mul(a, tb))
    return broadcast_to(out, node.shape)


def div(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    return Node(a.value / b.value, "div", (a, b))


def _div_vjp(node, g):
    a, b = node.parents
    ga = sum_to(div(g, b), a.shape)
    gb = sum_to(neg(div(mul(g, node), b)), b.shape)
    return ga, gb


def _div_jvp(node, tans):
    a, b = node.parents
    ta, tb = tans
    out = None
    if ta is not None:
        out = div(ta, b)
    if tb is not None:
        term = neg(div(mul(node, tb), b))
        out = term if out is None else add(out, term)
    return broadcast_to(out, node.shape)


def neg(a) -> Node:
    a = _lift(a)
    return Node(-a.value, "neg", (a,))


def _neg_vjp(node, g):
    return (neg(g),)


def _neg_jvp(node, tans):
    return neg(tans[0])


def matmul(a, b) -> Node:
    """2-D @ 2-D, 2-D @ 1-D, or 1-D @ 2-D product."""
    a, b = _lift(a), _lift(b)
    return Node(a.value @ b.value, "matmul", (a, b))


def _outer(u: Node, v: Node) -> Node:
    return mul(reshape(u, (u.shape[0], 1)), reshape(v, (1, v.shape[0])))


def _matmul_vjp(node, g):
    a, b = node.parents
    if a.ndim == 2 and b.ndim == 2:
        return matmul(g, transpose(b)), matmul(transpose(a), g)
    if a.ndim == 2 and b.ndim == 1:
        return _outer(g, b), matmul(transpose(a), g)
    if a.ndim == 1 and b.ndim == 2:
        return matmul(b, g), _outer(a, g)
    raise ValueError(f"unsupported matmul shapes {a.shape} @ {b.shape}")


def _matmul_jvp(node, tans):
    a, b = node.parents
    ta, tb = tans
    out = None
    if ta is not None:
        out = matmul(ta, b)
    if tb is not None:
        out = matmul(a, tb) if out is None else add(out, matmul(a, tb))
    return out


def dot(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
    return Node(a.value @ b.value, "dot", (a, b))


def _dot_vjp(node, g):
    a, b = node.parents
    return mul(g, b), mul(g, a)


def _dot_jvp(node, tans):
    a, b = node.parents
    ta, tb = tans
    out = None
    if ta is not None:
        out = dot(ta, b)
    if tb is not None:
        out = dot(a, tb) if out is None else add(out, dot(a, tb))
    return out


def transpose(a) -> Node:
    a = _lift(a)
    return Node(a.value.T, "transpose", (a,))


def _transpose_vjp(node, g):
    return (transpose(g),)


def _transpose_jvp(node, tans):
    return transpose(tans[0])


def reshape(a, shape) -> Node:
    a = _lift(a)
    return Node(a.value.reshape(shape), "reshape", (a,), shape)


def _reshape_vjp(node, g):
    return (reshape(g, node.parents[0].shape),)


def _reshape_jvp(node, tans):
    return reshape(tans[0], node.aux)


def broadcast_to(a, shape) -> Node:
    a = _lift(a)
    if a.shape == tuple(shape):
        return a
    return Node(np.broadcast_to(a.value, shape).copy(), "broadcast", (a,), tuple(shape))


def _broadcast_vjp(node, g):
    return (sum_to(g, node.parents[0].shape),)


def _broadcast_jvp(node, tans):
    return broadcast_to(tans[0], node.aux)


def sum_to(a, shape) -> Node:
    """Reduce by summation down to a broadcast-compatible shape."""
    a = _lift(a)
    if a.shape == tuple(shape):
        return a
    return Node(_sum_to_value(a.value, tuple(shape)), "sum_to", (a,), tuple(shape))


def _sum_to_vjp(node, g):
    return (broadcast_to(g, node.parents[0].shape),)


def _sum_to_jvp(node, tans):
    return sum_to(tans[0], node.aux)


def vsum(a, axis=None, keepdims=False) -> Node:
    a = _lift(a)
    return Node(a.value.sum(axis=axis, keepdims=keepdims), "vsum", (a,), (axis, keepdims))


def _vsum_vjp(node, g):
    (a,) = node.parents
    axis, keepdims = node.aux
    if axis is not None and not keepdims:
        kshape = list(a.shape)
        for ax in (axis if isinstance(axis, tuple) else (axis,)):
            kshape[ax] = 1
        g = reshape(g, tuple(kshape))
    return (broadcast_to(g, a.shape),)


def _vsum_jvp(node, tans):
    axis, keepdims = node.aux
    return vsum(tans[0], axis=axis, keepdims=keepdims)


def tanh(a) -> Node:
    a = _lift(a)
    return Node(np.tanh(a.value), "tanh", (a,))


def _tanh_vjp(node, g):
    return (mul(g, sub(1.0, mul(node, node))),)


def _tanh_jvp(node, tans):
    return mul(tans[0], sub(1.0, mul(node, node)))


def exp(a) -> Node:
    a = _lift(a)
    return Node(np.exp(a.value), "exp", (a,))


def _exp_vjp(node, g):
    return (mul(g, node),)


def _exp_jvp(node, tans):
    return mul(tans[0], node)


def log(a) -> Node:
    a = _lift(a)
    return Node(np.log(a.value), "log", (a,))


def _log_vjp(node, g):
    return (div(g, node.parents[0]),)


def _log_jvp(node, tans):
    return div(tans[0], node.parents[0])


def sqrt(a) -> Node:
    a = _lift(a)
    return Node(np.sqrt(a.value), "sqrt", (a,))


def _sqrt_vjp(node, g):
    return (div(mul(g, 0.5), node),)


def _sqrt_jvp(node, tans):
    return div(mul(tans[0], 0.5), node)


def absolute(a) -> Node:
    a = _lift(a)
    return Node(np.abs(a.value), "abs", (a,))


def _abs_vjp(node, g):
    s = constant(np.sign(node.parents[0].value))
    return (mul(g, s),)


def _abs_jvp(node, tans):
    s = constant(np.sign(node.parents[0].value))
    return mul(tans[0], s)


def relu(a) -> Node:
    a = _lift(a)
    return Node(np.maximum(a.value, 0.0), "relu", (a,))


def _relu_vjp(node, g):
    m = constant((node.parents[0].value > 0.0).astype(np.float64))
    return (mul(g, m),)


def _relu_jvp(node, tans):
    m = constant((node.parents[0].value > 0.0).astype(np.float64))
    return mul(tans[0], m)


def _softplus_value(x: np.ndarray) -> np.ndarray:
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def softplus(a) -> Node:
    a = _lift(a)
    return Node(_softplus_value(a.value), "softplus", (a,))


def _softplus_vjp(node, g):
    return (mul(g, sigmoid(node.parents[0])),)


def _softplus_jvp(node, tans):
    return mul(tans[0], sigmoid(node.parents[0]))


def _sigmoid_value(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Node:
    a = _lift(a)
    return Node(_sigmoid_value(np.atleast_1d(a.value)).reshape(a.shape), "sigmoid", (a,))


def _sigmoid_vjp(node, g):
    return (mul(g, mul(node, sub(1.0, node))),)


def _sigmoid_jvp(node, tans):
    return mul(tans[0], mul(node, sub(1.0, node)))


def softmax(a) -> Node:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    a = _lift(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return Node(y, "softmax", (a,))


def _softmax_vjp(node, g):
    inner = vsum(mul(g, node), axis=-1, keepdims=True)
    return (mul(node, sub(g, inner)),)


def _softmax_jvp(node, tans):
    t = tans[0]
    inner = vsum(mul(t, node), axis=-1, keepdims=True)
    return mul(node, sub(t, inner))


def clip(a, lo: float, hi: float) -> Node:
    a = _lift(a)
    return Node(np.clip(a.value, lo, hi), "clip", (a,), (lo, hi))


def _clip_vjp(node, g):
    lo, hi = node.aux
    v = node.parents[0].value
    m = constant(((v > lo) & (v < hi)).astype(np.float64))
    return (mul(g, m),)


def _clip_jvp(node, tans):
    lo, hi = node.aux
    v = node.parents[0].value
    m = constant(((v > lo) & (v < hi)).astype(np.float64))
    return mul(tans[0], m)


def concat_cols(a, b) -> Node:
    """Column-wise concatenation of two 2-D arrays."""
    a, b = _lift(a), _lift(b)
    return Node(np.concatenate([a.value, b.value], axis=1), "concat_cols", (a, b))


def _concat_cols_vjp(node, g):
    a, b = node.parents
    na = a.shape[1]
    return getcols(g, 0, na), getcols(g, na, na + b.shape[1])


def _concat_cols_jvp(node, tans):
    a, b = node.parents
    ta, tb = tans
    if ta is None:
        ta = constant(np.zeros(a.shape))
    if tb is None:
        tb = constant(np.zeros(b.shape))
    return concat_cols(ta, tb)


def getcols(a, j0: int, j1: int) -> Node:
    a = _lift(a)
    return Node(a.value[:, j0:j1].copy(), "getcols", (a,), (j0, j1))


def _getcols_vjp(node, g):
    (a,) = node.parents
    j0, j1 = node.aux
    return (padcols(g, j0, a.shape[1]),)


def _getcols_jvp(node, tans):
    j0, j1 = node.aux
    return getcols(tans[0], j0, j1)


def padcols(a, j0: int, width: int) -> Node:
    """Embed columns into a zero matrix of the given total width."""
    a = _lift(a)
    out = np.zeros((a.shape[0], width))
    out[:, j0:j0 + a.shape[1]] = a.value
    return Node(out, "padcols", (a,), (j0, width))


def _padcols_vjp(node, g):
    (a,) = node.parents
    j0, _ = node.aux
    return (getcols(g, j0, j0 + a.shape[1]),)


def _padcols_jvp(node, tans):
    j0, width = node.aux
    return padcols(tans[0], j0, width)


def concat_rows(parts) -> Node:
    """Row-wise concatenation of 2-D arrays."""
    parts = tuple(_lift(p) for p in parts)
    return Node(np.concatenate([p.value for p in parts], axis=0), "concat_rows", parts)


def _concat_rows_vjp(node, g):
    out = []
    row = 0
    for p in node.parents:
        n = p.shape[0]
        out.append(getrows(g, row, row + n))
        row += n
    return tuple(out)


def _concat_rows_jvp(node, tans):
    pieces = []
    for p, t in zip(node.parents, tans):
        pieces.append(constant(np.zeros(p.shape)) if t is None else t)
    return concat_rows(pieces)


def getrows(a, i0: int, i1: int) -> Node:
    a = _lift(a)
    return Node(a.value[i0:i1].copy(), "getrows", (a,), (i0, i1))


def _getrows_vjp(node, g):
    (a,) = node.parents
    i0, i1 = node.aux
    return (padrows(g, i0, a.shape[0]),)


def _getrows_jvp(node, tans):
    i0, i1 = node.aux
    return getrows(tans[0], i0, i1)


def padrows(a, i0: int, height: int) -> Node:
    """Embed rows into a zero matrix with the given total row count."""
    a = _lift(a)
    out = np.zeros((height,) + a.shape[1:])
    out[i0:i0 + a.shape[0]] = a.value
    return Node(out, "padrows", (a,), (i0, height))


def _padrows_vjp(node, g):
    (a,) = node.parents
    i0, _ = node.aux
    return (getrows(g, i0, i0 + a.shape[0]),)


def _padrows_jvp(node, tans):
    i0, height = node.aux
    return padrows(tans[0], i0, height)


def pairwise_sqdist(x) -> Node:
    """Matrix of squared distances |x_j - x_l|^2 over the rows of x."""
    x = _lift(x)
    sq = np.einsum("nd,nd->n", x.value, x.value)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x.value @ x.value.T)
    np.maximum(d2, 0.0, out=d2)
    return Node(d2, "pairwise_sqdist", (x,))


def _pairwise_sqdist_vjp(node, g):
    (x,) = node.parents
    row = vsum(g, axis=1)
    col = vsum(g, axis=0)
    weighted = add(matmul(g, x), matmul(transpose(g), x))
    scaled = mul(x, add(reshape(row, (x.shape[0], 1)), reshape(col, (x.shape[0], 1))))
    return (mul(2.0, sub(scaled, weighted)),)


def _pairwise_sqdist_jvp(node, tans):
    (x,) = node.parents
    t = tans[0]
    s = vsum(mul(x, t), axis=1)
    n = x.shape[0]
    cross = add(matmul(t, transpose(x)), matmul(x, transpose(t)))
    return mul(2.0, sub(add(reshape(s, (n, 1)), reshape(s, (1, n))), cross))


def diagonal(a) -> Node:
    a = _lift(a)
    return Node(np.diagonal(a.value).copy(), "diagonal", (a,))


def _diagonal_vjp(node, g):
    return (diag_embed(g),)


def _diagonal_jvp(node, tans):
    return diagonal(tans[0])


def diag_embed(a) -> Node:
    a = _lift(a)
    return Node(np.diag(a.value), "diag_embed", (a,))


def _diag_embed_vjp(node, g):
    return (diagonal(g),)


def _diag_embed_jvp(node, tans):
    return diag_embed(tans[0])


def linearized(x, value, jacobian) -> Node:
    """Black-box map with a frozen per-sample Jacobian.

    ``x`` has shape (N, d), ``value`` (N, m), ``jacobian`` (N, m, d).
    Gradients flow through the provided Jacobian as a constant, so
    second-order derivatives through this node are not available.
    """
    x = _lift(x)
    node = Node(_asarray(value), "linearized", (x,), _asarray(jacobian))
    return node


def _linearized_vjp(node, g):
    jac = node.aux
    return (constant(np.einsum("nmd,nm->nd", jac, np.broadcast_to(g.value, node.shape))),)


def _linearized_jvp(node, tans):
    jac = node.aux
    t = tans[0]
    return constant(np.einsum("nmd,nd->nm", jac, np.broadcast_to(t.value, node.parents[0].shape)))


_VJP.update({
    "linearized": _linearized_vjp,
    "add": _add_vjp, "sub": _sub_vjp, "mul": _mul_vjp, "div": _div_vjp,
    "neg": _neg_vjp, "matmul": _matmul_vjp, "dot": _dot_vjp,
    "transpose": _transpose_vjp, "reshape": _reshape_vjp,
    "broadcast": _broadcast_vjp, "sum_to": _sum_to_vjp, "vsum": _vsum_vjp,
    "tanh": _tanh_vjp, "exp": _exp_vjp, "log": _log_vjp, "sqrt": _sqrt_vjp,
    "abs": _abs_vjp, "relu": _relu_vjp, "softplus": _softplus_vjp,
    "sigmoid": _sigmoid_vjp, "softmax": _softmax_vjp, "clip": _clip_vjp,
    "concat_cols": _concat_cols_vjp, "getcols": _getcols_vjp,
    "padcols": _padcols_vjp, "diagonal": _diagonal_vjp,
    "diag_embed": _diag_embed_vjp, "concat_rows": _concat_rows_vjp,
    "getrows": _getrows_vjp, "padrows": _padrows_vjp,
    "pairwise_sqdist": _pairwise_sqdist_vjp,
})

_JVP.update({
    "linearized": _linearized_jvp,
    "add": _add_jvp, "sub": _sub_jvp, "mul": _mul_jvp, "div": _div_jvp,
    "neg": _neg_jvp, "matmul": _matmul_jvp, "dot": _dot_jvp,
    "transpose": _transpose_jvp, "reshape": _reshape_jvp,
    "broadcast": _broadcast_jvp, "sum_to": _sum_to_jvp, "vsum": _vsum_jvp,
    "tanh": _tanh_jvp, "exp": _exp_jvp, "log": _log_jvp, "sqrt": _sqrt_jvp,
    "abs": _abs_jvp, "relu": _relu_jvp, "softplus": _softplus_jvp,
    "sigmoid": _sigmoid_jvp, "softmax": _softmax_jvp, "clip": _clip_jvp,
    "concat_cols": _concat_cols_jvp, "getcols": _getcols_jvp,
    "padcols": _padcols_jvp, "diagonal": _diagonal_jvp,
    "diag_embed": _diag_embed_jvp, "concat_rows": _concat_rows_jvp,
    "getrows": _getrows_jvp, "padrows": _padrows_jvp,
    "pairwise_sqdist": _pairwise_sqdist_jvp,
})


# ---------------------------------------------------------------------------
# passes


def backward(tape: Tape, seed: Node, start: int = 0) -> dict[Node, Node]:
    """Reverse pass from a scalar seed over ``tape.nodes[start:]``.

    Adjoints are built from recorded primitives, so the returned gradient
    nodes stay differentiable. Fan-out accumulates additively; nodes the
    seed does not reach simply have no entry (gradient zero).
    """
    if len(tape.nodes) == 0:
        raise ValueError("tape is empty")
    if seed.value.shape != ():
        raise ValueError(f"backward seed must be scalar, got shape {seed.value.shape}")
    if seed.index < start:
        raise ValueError("seed precedes the requested region")
    region = tape.nodes[start:seed.index + 1]
    adjoints: dict[Node, Node] = {seed: constant(1.0)}
    for node in reversed(region):
        g = adjoints.get(node)
        if g is None or node.op is None:
            continue
        contribs = _VJP[node.op](node, g)
        for parent, contrib in zip(node.parents, contribs):
            if contrib is None:
                continue
            prev = adjoints.get(parent)
            adjoints[parent] = contrib if prev is None else add(prev, contrib)
    return adjoints


def grad(tape: Tape, seed: Node, wrt: Sequence[Node], start: int = 0) -> list[np.ndarray]:
    """Gradient values of a scalar seed with respect to the given nodes."""
    adjoints = backward(tape, seed, start=start)
    out = []
    for node in wrt:
        a = adjoints.get(node)
        out.append(np.zeros_like(node.value) if a is None else np.broadcast_to(a.value, node.shape).copy())
    return out


def jvp(tape: Tape, seeds: dict[Node, Node], start: int, stop: int) -> dict[Node, Node]:
    """Forward tangent pass over ``tape.nodes[start:stop]``.

    ``seeds`` maps input nodes (recorded before the region) to tangent
    nodes. Returns tangents for every reached node; unreached nodes have
    tangent zero (no entry). Tangents are nodes, so results remain
    differentiable.
    """
    tangents: dict[Node, Node] = dict(seeds)
    for node in tape.nodes[start:stop]:
        if node.op is None:
            continue
        tans = [tangents.get(p) for p in node.parents]
        if all(t is None for t in tans):
            continue
        tangents[node] = _JVP[node.op](node, tans)
    return tangents


def directional_derivative(f: Callable[[Node], Node], x, v) -> np.ndarray:
    """Jacobian-vector product J_f(x) v of a recorded map."""
    x = _asarray(x)
    v = _asarray(v)
    if x.shape != v.shape:
        raise ValueError(f"direction shape {v.shape} does not match input {x.shape}")
    return dual_eval(f, x, v).tangent


def dual_eval(f: Callable[[Node], Node], x, v) -> DualVector:
    """Evaluate ``f`` with a dual input, propagating the tangent exactly."""
    x = _asarray(x)
    v = _asarray(v)
    with Tape() as tape:
        xn = leaf(x)
        start = tape.mark()
        y = f(xn)
        tangents = jvp(tape, {xn: constant(v)}, start, tape.mark())
        t = tangents.get(y)
        tval = np.zeros_like(y.value) if t is None else np.broadcast_to(t.value, y.shape).copy()
    return DualVector(value=y.value, tangent=tval)
