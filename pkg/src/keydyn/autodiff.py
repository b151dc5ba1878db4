"""A small reverse-mode differentiation engine over numpy arrays.

Every operation on a :class:`Var` appends a node to its :class:`Tape`. Nodes are
created in topological order, so ``Tape.backward`` is a single reverse sweep
that visits each node once.

The module-level functions (``exp``, ``sum``, ``matmul``, ...) accept plain
arrays too, in which case they simply evaluate with numpy. That lets model code
be written once and run either traced or untraced.
"""
from __future__ import annotations

import builtins

import numpy as np


class Tape:
    def __init__(self, dtype=np.float64):
        self.nodes: list[Var] = []
        self.dtype = dtype

    def var(self, value, name: str | None = None) -> "Var":
        """A leaf that gradients will be reported for."""
        return Var(np.asarray(value, dtype=self.dtype), self, (), name=name)

    def backward(self, out: "Var") -> None:
        if out.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes[: out.index + 1]):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                d = vjp(g)
                parent.grad = d if parent.grad is None else parent.grad + d
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)


class Var:
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape, parents, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.name = name
        self.grad = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    @property
    def T(self):
        return swapaxes(self)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, (int, float)):
        return float(x)  # python scalars stay weakly typed, so float32 graphs stay float32
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(float)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(out, tape, parents):
    parents = tuple((p, f) for p, f in parents if isinstance(p, Var))
    return Var(out, tape, parents)


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va + vb
    if tape is None:
        return out
    return _node(out, tape, [(a, lambda g: _unbroadcast(g, va.shape)),
                             (b, lambda g: _unbroadcast(g, vb.shape))])


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va - vb
    if tape is None:
        return out
    return _node(out, tape, [(a, lambda g: _unbroadcast(g, va.shape)),
                             (b, lambda g: -_unbroadcast(g, vb.shape))])


def mul(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va * vb
    if tape is None:
        return out
    return _node(out, tape, [(a, lambda g: _unbroadcast(g * vb, va.shape)),
                             (b, lambda g: _unbroadcast(g * va, vb.shape))])


def div(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va / vb
    if tape is None:
        return out
    return _node(out, tape, [(a, lambda g: _unbroadcast(g / vb, va.shape)),
                             (b, lambda g: _unbroadcast(-g * out / vb, vb.shape))])


def matmul(a, b):
    """Batched matrix product of operands with ndim >= 2 (numpy broadcasting rules)."""
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va @ vb
    if tape is None:
        return out
    return _node(out, tape, [(a, lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)),
                             (b, lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape))])


def exp(x):
    out = np.exp(value(x))
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: g * out)])


def log(x):
    vx = value(x)
    out = np.log(vx)
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: g / vx)])


def abs(x):
    vx = value(x)
    out = np.abs(vx)
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: g * np.sign(vx))])


def relu(x):
    vx = value(x)
    out = np.maximum(vx, 0.0)
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: g * (vx > 0.0))])


def sum(x, axis=None, keepdims=False):
    vx = value(x)
    out = np.sum(vx, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, vx.shape).copy()

    return _node(np.asarray(out), x.tape, [(x, vjp)])


def mean(x, axis=None, keepdims=False):
    vx = value(x)
    n = vx.size if axis is None else np.prod([vx.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def square(x):
    return mul(x, x)


def reshape(x, shape):
    vx = value(x)
    out = vx.reshape(shape)
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: g.reshape(vx.shape))])


def swapaxes(x, a=-1, b=-2):
    out = np.swapaxes(value(x), a, b)
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: np.swapaxes(g, a, b))])


def getitem(x, idx):
    vx = value(x)
    out = vx[idx]
    if not isinstance(x, Var):
        return out

    def vjp(g):
        full = np.zeros_like(vx)
        np.add.at(full, idx, g)
        return full

    return _node(np.asarray(out), x.tape, [(x, vjp)])


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(lo, hi)
        parents.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _node(out, tape, parents)


def softmax(x, axis=-1):
    """Max-shifted softmax; exact for any finite input."""
    vx = value(x)
    e = np.exp(vx - np.max(vx, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)
    if not isinstance(x, Var):
        return out
    return _node(out, x.tape, [(x, lambda g: out * (g - np.sum(g * out, axis=axis, keepdims=True)))])


def grad_check(f, params, eps: float = 1e-5, floor: float = 1e-8):
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a list of Vars (traced) or arrays (for finite differences)
    aligned with ``params``. Returns a dict with the analytic gradients, the
    numeric ones and the worst relative error over all entries.
    """
    params = [np.array(p, dtype=float) for p in params]
    tape = Tape()
    vs = [tape.var(p) for p in params]
    out = f(vs)
    if not isinstance(out, Var):
        analytic = [np.zeros_like(p) for p in params]
    else:
        tape.backward(out)
        analytic = [v.grad for v in vs]
    numeric = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            args = [q.copy() for q in params]
            args[k][i] = p[i] + eps
            hi = float(value(f(args)))
            args[k][i] = p[i] - eps
            lo = float(value(f(args)))
            g[i] = (hi - lo) / (2 * eps)
        numeric.append(g)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        # entries far below the largest gradient are compared on that scale
        tiny = builtins.max(floor, 1e-3 * float(np.max(np.abs(n), initial=0.0)))
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), tiny)
        if a.size:
            worst = builtins.max(worst, float(np.max(np.abs(a - n) / scale)))
    return {"analytic": analytic, "numeric": numeric, "max_rel_err": worst}
