"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every operation on a :class:`Var` appends one node to its :class:`Tape`.
``Tape.backward`` walks the nodes in reverse creation order, so gradient
accumulation order is fixed by the forward program and results are
bitwise repeatable.
"""
from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    """Raised when a tape is reused or mixed with another tape."""


class ShapeError(ValueError):
    pass


class _IndexGrad:
    """Gradient contribution touching only ``parent[index]``."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Var:
    __slots__ = ("value", "tape", "parents", "vjp", "grad", "requires_grad", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, value, tape, parents=(), vjp=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Records operations for one forward pass; backward runs once."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.used = False

    def leaf(self, value, requires_grad=True) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self, requires_grad=requires_grad)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def _record(self, value, parents, vjp) -> Var:
        needs = any(p.requires_grad for p in parents)
        out = Var(value, self, parents, vjp if needs else None, requires_grad=needs)
        if needs:
            self.nodes.append(out)
        return out

    def backward(self, out: Var, grad=None) -> None:
        if self.used:
            raise TapeError("backward already called on this tape")
        self.used = True
        if out.tape is not self:
            raise TapeError("output does not belong to this tape")
        if grad is None:
            if out.value.size != 1:
                raise ShapeError("backward without an output gradient needs a scalar output")
            grad = np.ones_like(out.value)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != out.value.shape:
            raise ShapeError(f"output gradient shape {grad.shape} != output shape {out.value.shape}")
        out.grad = grad.copy()
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            contribs = node.vjp(g)
            for parent, c in zip(node.parents, contribs):
                if c is None or not parent.requires_grad:
                    continue
                if isinstance(c, _IndexGrad):
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.value)
                    if _is_fancy(c.index):
                        np.add.at(parent.grad, c.index, c.value)
                    else:
                        parent.grad[c.index] += c.value
                elif parent.grad is None:
                    parent.grad = np.array(c, dtype=np.float64, copy=True)
                else:
                    parent.grad += c
            if node is not out:
                node.grad = None  # release intermediate buffers


def _is_fancy(index):
    if isinstance(index, tuple):
        return any(_is_fancy(i) for i in index)
    return isinstance(index, (np.ndarray, list))


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _lift(x, tape):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), tape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return tape._record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return tape._record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    return tape._record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    out = av / bv
    return tape._record(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def square(a: Var):
    av = a.value
    return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return tape._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# --- nonlinearities ---------------------------------------------------------

def tanh(a: Var):
    out = np.tanh(a.value)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Var):
    mask = a.value > 0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Var):
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return a.tape._record(out, (a,), lambda g: (g * sig,))


def exp(a: Var):
    out = np.exp(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def log(a: Var):
    x = a.value
    return a.tape._record(np.log(x), (a,), lambda g: (g / x,))


def vabs(a: Var):
    s = np.sign(a.value)
    return a.tape._record(np.abs(a.value), (a,), lambda g: (g * s,))


def sqrt(a: Var):
    out = np.sqrt(a.value)
    return a.tape._record(out, (a,), lambda g: (g * 0.5 / out,))


def row_norm(a: Var):
    """Euclidean norm of each row of an (n, d) Var; subgradient 0 at the origin."""
    out = np.sqrt(np.sum(a.value * a.value, axis=1))
    safe = np.where(out > 0, out, 1.0)
    unit = np.where((out > 0)[:, None], a.value / safe[:, None], 0.0)
    return a.tape._record(out, (a,), lambda g: (g[:, None] * unit,))


def minimum(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    pick_a = a.value <= b.value
    sa, sb = a.value.shape, b.value.shape
    return tape._record(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def clip(a: Var, lo: float, hi: float):
    inside = (a.value >= lo) & (a.value <= hi)
    return a.tape._record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def detach(a: Var) -> Var:
    return Var(a.value, a.tape)


# --- reductions and shape ops -----------------------------------------------

def vsum(a: Var, axis=None):
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape._record(np.asarray(a.value.sum(axis=axis)), (a,), vjp)


def mean(a: Var, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis) * (1.0 / n)


def reshape(a: Var, shape):
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var):
    return a.tape._record(a.value.T, (a,), lambda g: (g.T,))


def getitem(a: Var, idx):
    return a.tape._record(np.asarray(a.value[idx]), (a,), lambda g: (_IndexGrad(idx, g),))


def concat(xs, axis=-1):
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        res = []
        for k in range(len(vals)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[k], bounds[k + 1])
            res.append(g[tuple(sl)])
        return res

    return tape._record(out, tuple(xs), vjp)


def stack(xs, axis=0):
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    expanded = [reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs]
    return concat(expanded, axis=axis)


def softmax(a: Var, axis=-1):
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return a.tape._record(p, (a,), vjp)


# --- grid ops ---------------------------------------------------------------

def stencil3x3(grid: Var):
    """(H, W, C) -> (H, W, 9C): each cell gets its zero-padded 3x3 neighbourhood."""
    h, w, c = grid.value.shape
    padded = np.zeros((h + 2, w + 2, c))
    padded[1:-1, 1:-1] = grid.value
    parts = [padded[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
    out = np.concatenate(parts, axis=-1)

    def vjp(g):
        gp = np.zeros((h + 2, w + 2, c))
        k = 0
        for dy in range(3):
            for dx in range(3):
                gp[dy : dy + h, dx : dx + w] += g[..., k * c : (k + 1) * c]
                k += 1
        return (gp[1:-1, 1:-1],)

    return grid.tape._record(out, (grid,), vjp)


def bilinear(grid: Var, u, v):
    """Sample an (H, W, C) grid at continuous (u, v) = (column, row) coordinates.

    Coordinates are clamped to [0, W-1] x [0, H-1]; clamped coordinates get a
    zero gradient.
    """
    tape = _tape_of(grid, u, v)
    grid, u, v = _lift(grid, tape), _lift(u, tape), _lift(v, tape)
    gv = grid.value
    h, w, _ = gv.shape
    bad = ~(np.isfinite(u.value) & np.isfinite(v.value))
    uu = np.clip(np.where(bad, 0.0, u.value), 0.0, w - 1.0)
    vv = np.clip(np.where(bad, 0.0, v.value), 0.0, h - 1.0)
    live_u = uu == u.value
    live_v = vv == v.value
    i0 = np.minimum(np.floor(uu).astype(np.int64), max(w - 2, 0))
    j0 = np.minimum(np.floor(vv).astype(np.int64), max(h - 2, 0))
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fu = (uu - i0)[:, None]
    fv = (vv - j0)[:, None]
    f00, f10 = gv[j0, i0], gv[j0, i1]
    f01, f11 = gv[j1, i0], gv[j1, i1]
    out = (1 - fu) * (1 - fv) * f00 + fu * (1 - fv) * f10 + (1 - fu) * fv * f01 + fu * fv * f11
    out[bad] = np.nan  # non-finite coordinates propagate instead of indexing garbage

    def vjp(g):
        gg = np.zeros_like(gv)
        np.add.at(gg, (j0, i0), g * (1 - fu) * (1 - fv))
        np.add.at(gg, (j0, i1), g * fu * (1 - fv))
        np.add.at(gg, (j1, i0), g * (1 - fu) * fv)
        np.add.at(gg, (j1, i1), g * fu * fv)
        du = (f10 - f00) * (1 - fv) + (f11 - f01) * fv
        dv = (f01 - f00) * (1 - fu) + (f11 - f10) * fu
        gu = (g * du).sum(axis=1) * live_u
        gvv = (g * dv).sum(axis=1) * live_v
        return (gg, gu, gvv)

    return tape._record(out, (grid, u, v), vjp)
