"""Reverse-mode automatic differentiation on a linear tape.

Nodes carry float64 numpy arrays (0-d for scalars).  Every primitive below
accepts plain arrays as well; when none of its inputs is a :class:`Var` it
returns a plain array and records nothing, which gives a cheap no-grad path
for the same model code.

Nodes are appended to the tape in creation order, so walking the tape
backwards is a reverse topological order and each node is visited once.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Sequence

import numpy as np

EXP_CLAMP = 50.0


class TapeError(FloatingPointError):
    """A recorded primitive produced an invalid value."""

    def __init__(self, primitive: str, message: str):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class Tape:
    """Owns the recorded graph of one differentiation pass."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self.saturations = 0

    def var(self, value) -> "Var":
        v = Var(np.array(value, dtype=np.float64), self, (), "leaf")
        self.nodes.append(v)
        return v

    def reset(self) -> None:
        self.nodes.clear()
        self.saturations = 0

    def backward(self, root: "Var") -> None:
        if root.tape is not self:
            raise ValueError("root was recorded on a different tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = np.ones_like(root.value)
        for node in reversed(self.nodes):
            adj = node.adjoint
            if adj is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(adj)
                if parent.adjoint is None:
                    parent.adjoint = contrib
                else:
                    parent.adjoint = parent.adjoint + contrib


class Var:
    __slots__ = ("value", "adjoint", "parents", "tape", "op")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, value: np.ndarray, tape: Tape, parents, op: str):
        self.value = value
        self.adjoint = None
        self.parents = parents
        self.tape = tape
        self.op = op

    def __repr__(self) -> str:
        return f"Var({self.op}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    @property
    def grad(self) -> np.ndarray:
        if self.adjoint is None:
            return np.zeros_like(self.value)
        return self.adjoint

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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value(x) -> np.ndarray:
    """Detached value of a Var or array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check(op: str, out) -> None:
    # one reduction instead of isfinite + all; a finite sum means finite entries
    # (the converse fails only when the sum itself overflows, near 1e308)
    if not math.isfinite(np.add.reduce(out, None)):
        if not np.isfinite(out).all():
            raise TapeError(op, "non-finite value")


def _record(op: str, out, inputs: Sequence, vjps: Sequence[Callable]):
    _check(op, out)
    tape = None
    parents = []
    for x, vjp in zip(inputs, vjps):
        if isinstance(x, Var):
            tape = x.tape
            parents.append((x, vjp))
    if tape is None:
        return out
    node = Var(np.asarray(out, dtype=np.float64), tape, tuple(parents), op)
    tape.nodes.append(node)
    return node


# elementwise arithmetic --------------------------------------------------


def add(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("add", av + bv, (a, b),
                   (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("sub", av - bv, (a, b),
                   (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("mul", av * bv, (a, b),
                   (lambda g: _unbroadcast(g * bv, sa), lambda g: _unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = _val(a), _val(b)
    if np.any(bv == 0):
        raise TapeError("div", "division by zero")
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record("div", out, (a, b),
                   (lambda g: _unbroadcast(g / bv, sa),
                    lambda g: _unbroadcast(-g * out / bv, sb)))


def neg(a):
    return _record("neg", -_val(a), (a,), (lambda g: -g,))


def power(a, exponent: float):
    av = _val(a)
    if not np.isscalar(exponent):
        raise TypeError("power supports a constant exponent only")
    if exponent < 0 and np.any(av == 0):
        raise TapeError("power", "division by zero")
    with np.errstate(all="ignore"):
        out = av ** exponent
        d = exponent * av ** (exponent - 1) if exponent != 0 else np.zeros_like(av)
    return _record("power", out, (a,), (lambda g: g * d,))


def square(a):
    av = _val(a)
    return _record("square", av * av, (a,), (lambda g: 2.0 * g * av,))


def sqrt(a):
    av = _val(a)
    if np.any(av < 0):
        raise TapeError("sqrt", "negative argument")
    out = np.sqrt(av)
    if np.any(out == 0) and isinstance(a, Var):
        raise TapeError("sqrt", "division by zero in derivative")
    return _record("sqrt", out, (a,), (lambda g: 0.5 * g / out,))


def _clamp(op: str, a, av):
    av = np.asarray(av)
    if av.size == 0 or (av.max() <= EXP_CLAMP and av.min() >= -EXP_CLAMP):
        return av
    clipped = np.minimum(np.maximum(av, -EXP_CLAMP), EXP_CLAMP)
    hits = int(np.count_nonzero(clipped != av))
    if hits:
        if isinstance(a, Var):
            a.tape.saturations += hits
        warnings.warn(f"{op}: {hits} input(s) clamped to +-{EXP_CLAMP}", RuntimeWarning)
    return clipped


def tanh(a):
    av = _val(a)
    out = np.tanh(_clamp("tanh", a, av))
    return _record("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def exp(a):
    av = _val(a)
    out = np.exp(_clamp("exp", a, av))
    return _record("exp", out, (a,), (lambda g: g * out,))


def log(a):
    av = _val(a)
    if np.any(av <= 0):
        raise TapeError("log", "non-positive argument")
    return _record("log", np.log(av), (a,), (lambda g: g / av,))


def sin(a):
    av = _val(a)
    return _record("sin", np.sin(av), (a,), (lambda g: g * np.cos(av),))


def cos(a):
    av = _val(a)
    return _record("cos", np.cos(av), (a,), (lambda g: -g * np.sin(av),))


# linear algebra and shape ------------------------------------------------


def _swap(m):
    return np.swapaxes(m, -1, -2)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    sa, sb = np.shape(av), np.shape(bv)

    def vjp_a(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ _swap(b2)
        if av.ndim == 1:
            ga = ga[..., 0, :]
        return _unbroadcast(ga, sa)

    def vjp_b(g):
        a2 = av[None, :] if av.ndim == 1 else av
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        gb = _swap(a2) @ g2
        if bv.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(gb, sb)

    return _record("matmul", out, (a, b), (vjp_a, vjp_b))


def dot(a, b, axis: int = -1):
    """Inner product along ``axis`` (batched)."""
    return vsum(mul(a, b), axis=axis)


def norm(a, axis: int = -1):
    """Euclidean norm along ``axis``."""
    return sqrt(vsum(square(a), axis=axis))


def vsum(a, axis=None, keepdims: bool = False):
    av = _val(a)
    shape = np.shape(av)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g + np.zeros(shape)

    return _record("sum", out, (a,), (vjp,))


def transpose(a):
    """Swap the last two axes."""
    return _record("transpose", _swap(_val(a)), (a,), (_swap,))


def reshape(a, shape):
    av = _val(a)
    old = np.shape(av)
    return _record("reshape", np.reshape(av, shape), (a,), (lambda g: np.reshape(g, old),))


def expand_dims(a, axis: int):
    av = _val(a)
    old = np.shape(av)
    return _record("reshape", np.expand_dims(av, axis), (a,), (lambda g: np.reshape(g, old),))


def getitem(a, idx):
    av = _val(a)
    shape = np.shape(av)

    basic = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice, type(Ellipsis))) for i in idx))

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _record("getitem", av[idx], (a,), (vjp,))


def concatenate(parts: Sequence, axis: int = -1):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    vjps = []
    for i in range(len(vals)):
        vjps.append(lambda g, i=i: np.split(g, bounds, axis=axis)[i])
    return _record("concatenate", out, parts, vjps)


def stack(parts: Sequence, axis: int = 0):
    vals = [_val(p) for p in parts]
    out = np.stack(vals, axis=axis)
    vjps = [lambda g, i=i: np.take(g, i, axis=axis) for i in range(len(vals))]
    return _record("stack", out, parts, vjps)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "power": power,
    "tanh": tanh, "exp": exp, "log": log, "sin": sin, "cos": cos, "sqrt": sqrt,
    "dot": dot, "norm": norm,
}


# differentiation drivers ---------------------------------------------------


def value_and_grad(f: Callable, x) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function of one array argument."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("grad: non-finite input")
    tape = Tape()
    xv = tape.var(x)
    y = f(xv)
    if not isinstance(y, Var):
        return float(np.asarray(y)), np.zeros_like(x)
    if y.value.size != 1:
        raise ValueError(f"grad: function must be scalar-valued, got shape {y.value.shape}")
    tape.backward(y)
    return float(y.value), xv.grad.copy()


def grad(f: Callable, x) -> np.ndarray:
    """Gradient of a scalar-valued ``f`` at ``x``."""
    return value_and_grad(f, x)[1]


def batch_grad(f: Callable, X) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise values and gradients of ``f`` over a batch ``X`` of shape (B, n).

    ``f`` maps (B, n) to (B,) with rows independent, so the gradient of the
    sum recovers every per-row gradient in one backward pass.
    """
    X = np.asarray(X, dtype=np.float64)
    tape = Tape()
    xv = tape.var(X)
    y = f(xv)
    if not isinstance(y, Var):
        return np.asarray(y), np.zeros_like(X)
    tape.backward(vsum(y))
    return y.value.copy(), xv.grad.copy()


def param_grad(loss: Callable, params, expected_size: int | None = None) -> np.ndarray:
    """d loss / d params for a loss closure over a flat parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1:
        raise ValueError("params must be a flat vector")
    if expected_size is not None and params.size != expected_size:
        raise ValueError(f"parameter vector has length {params.size}, expected {expected_size}")
    tape = Tape()
    theta = tape.var(params)
    out = loss(theta)
    if not isinstance(out, Var):
        return np.zeros_like(params)
    if out.value.size != 1:
        raise ValueError("loss must be scalar-valued")
    tape.backward(out)
    return theta.grad.copy()
