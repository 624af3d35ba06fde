"""Reverse-mode differentiation on a recorded tape of array operations.

A :class:`Tape` records every primitive applied to a :class:`Var` together
with the vector-Jacobian products needed to push adjoints back to its
operands. Nodes are appended in evaluation order, so the node list is already
topologically sorted and one reverse sweep yields the full gradient.

The primitive functions in this module (``exp``, ``log``, ``softplus``,
``gammainc`` ...) accept plain floats and ndarrays as well; in that case they
simply return the numpy result. Model code written against them therefore
runs unchanged for value-only evaluation and for differentiation::

    >>> value, g = grad(lambda v: (v * v).sum(), np.array([3.0]))
    >>> value, g
    (9.0, array([6.]))
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import special

from .errors import CapabilityError, EvaluationError

__all__ = [
    "Tape",
    "Var",
    "grad",
    "value_of",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "square",
    "power",
    "logistic",
    "softplus",
    "log_logistic",
    "elementwise",
    "primitive",
    "sum",
    "concatenate",
    "gammainc",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Linear record of primitive evaluations for one gradient computation."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.ops: list[str] = []
        self.edges: list[tuple] = []

    def __len__(self) -> int:
        return len(self.values)

    def input(self, value) -> "Var":
        return self.record(np.array(value, dtype=float), "input", ())

    def record(self, value, op: str, edges: tuple) -> "Var":
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=float)
        index = len(self.values)
        # a finite sum implies finite entries; only inspect elementwise when it is not
        if not math.isfinite(value.sum()) and not np.isfinite(value).all():
            raise EvaluationError(f"non-finite value at tape node {index} ({op})", node=index)
        self.values.append(value)
        self.ops.append(op)
        self.edges.append(edges)
        return Var(self, index, value)

    def backward(self, output: "Var") -> list:
        """Propagate a unit adjoint from ``output``; returns adjoints per node."""
        adjoints: list = [None] * len(self.values)
        adjoints[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            a = adjoints[i]
            if a is None:
                continue
            for parent, vjp in self.edges[i]:
                contrib = vjp(a)
                prev = adjoints[parent]
                adjoints[parent] = contrib if prev is None else prev + contrib
        return adjoints


class Var:
    """A tape-tracked array value."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self) -> str:
        return f"Var(node={self.index}, value={self.value!r})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    # arithmetic
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

    def __pow__(self, other):
        return power(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis=axis)

    def reshape(self, *shape):
        return _reshape(self, shape[0] if len(shape) == 1 else shape)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNCS.get(ufunc)
        if method != "__call__" or kwargs or fn is None:
            raise CapabilityError(f"unsupported primitive: {ufunc.__name__}.{method}")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        fn = _FUNCTIONS.get(func)
        if fn is None:
            raise CapabilityError(f"unsupported primitive: {func.__name__}")
        return fn(*args, **kwargs)

    def __bool__(self):
        raise CapabilityError("a tracked value has no truth value; branch on value_of() instead")

    def _compare(self, other):
        raise CapabilityError("comparison is not differentiable; compare value_of() instead")

    __lt__ = __le__ = __gt__ = __ge__ = _compare
    __hash__ = object.__hash__


def value_of(x):
    """Underlying ndarray of a :class:`Var`, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise CapabilityError("operands belong to different tapes")
    return tape


def _edge(x, vjp):
    return ((x.index, vjp),) if isinstance(x, Var) else ()


# --- binary arithmetic ------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        out,
        "add",
        _edge(a, lambda g: _unbroadcast(g, sa)) + _edge(b, lambda g: _unbroadcast(g, sb)),
    )


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        out,
        "sub",
        _edge(a, lambda g: _unbroadcast(g, sa)) + _edge(b, lambda g: -_unbroadcast(g, sb)),
    )


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        out,
        "mul",
        _edge(a, lambda g: _unbroadcast(g * bv, sa)) + _edge(b, lambda g: _unbroadcast(g * av, sb)),
    )


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        out,
        "div",
        _edge(a, lambda g: _unbroadcast(g / bv, sa))
        + _edge(b, lambda g: _unbroadcast(-g * out / bv, sb)),
    )


def power(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = av**bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    edges = _edge(a, lambda g: _unbroadcast(g * bv * av ** (bv - 1.0), sa))
    if isinstance(b, Var):
        edges += _edge(b, lambda g: _unbroadcast(g * out * np.log(av), sb))
    return tape.record(out, "power", edges)


# --- unary primitives ------------------------------------------------------------


def _unary(x, op, fn, dfn):
    if not isinstance(x, Var):
        return fn(x)
    out = fn(x.value)
    xv = x.value
    return x.tape.record(out, op, ((x.index, lambda g: g * dfn(xv, out)),))


def elementwise(x, fn, dfn, op: str = "elementwise"):
    """Apply a user-defined elementwise map ``fn`` with derivative ``dfn(x, y)``.

    This is the extension point for fused primitives: the tape records one
    node and multiplies incoming adjoints by ``dfn`` on the way back.
    """
    return _unary(x, op, fn, dfn)


def primitive(op: str, value, *pairs):
    """Record a fused primitive with hand-written vector-Jacobian products.

    ``pairs`` are ``(input, vjp)`` with ``vjp`` mapping the output adjoint to
    the adjoint of that input. Inputs that are not :class:`Var` are treated
    as constants, and with no tracked input the plain ``value`` is returned.
    """
    tape = _tape_of(*(x for x, _ in pairs))
    if tape is None:
        return value
    return tape.record(value, op, tuple((x.index, vjp) for x, vjp in pairs if isinstance(x, Var)))


def neg(x):
    return _unary(x, "neg", np.negative, lambda x, y: -1.0)


def exp(x):
    return _unary(x, "exp", np.exp, lambda x, y: y)


def log(x):
    return _unary(x, "log", np.log, lambda x, y: 1.0 / x)


def log1p(x):
    return _unary(x, "log1p", np.log1p, lambda x, y: 1.0 / (1.0 + x))


def sqrt(x):
    return _unary(x, "sqrt", np.sqrt, lambda x, y: 0.5 / y)


def square(x):
    return _unary(x, "square", np.square, lambda x, y: 2.0 * x)


def logistic(x):
    """1 / (1 + exp(-x))."""
    return _unary(x, "logistic", special.expit, lambda x, y: y * (1.0 - y))


def _softplus(x):
    return np.logaddexp(0.0, x)


def softplus(x):
    """ln(1 + exp(x)), evaluated without overflow."""
    return _unary(x, "softplus", _softplus, lambda x, y: special.expit(x))


def log_logistic(x):
    """ln(logistic(x)) = -softplus(-x)."""
    return _unary(x, "log_logistic", lambda v: -_softplus(-v), lambda x, y: special.expit(-x))


# --- reductions and structure ----------------------------------------------------------


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis)
    if axis is None:
        vjp = lambda g: np.broadcast_to(g, shape)  # noqa: E731
    else:
        vjp = lambda g: np.broadcast_to(np.expand_dims(g, axis), shape)  # noqa: E731
    return x.tape.record(out, "sum", ((x.index, vjp),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in items)


def _getitem(x: Var, index):
    out = x.value[index]
    shape = x.value.shape
    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return full

    return x.tape.record(out, "getitem", ((x.index, vjp),))


def _reshape(x: Var, shape):
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape), "reshape", ((x.index, lambda g: g.reshape(old)),))


def concatenate(arrays, axis=0):
    tape = _tape_of(*arrays)
    values = [np.asarray(value_of(a), dtype=float) for a in arrays]
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    edges: tuple = ()
    for k, a in enumerate(arrays):
        if isinstance(a, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            sl = tuple(sl)
            edges += ((a.index, lambda g, sl=sl: g[sl]),)
    return tape.record(out, "concatenate", edges)


# --- regularized lower incomplete gamma -------------------------------------------------


def _gammainc_dshape(a: float, x: np.ndarray) -> np.ndarray:
    """Partial derivative of P(a, x) with respect to the shape ``a``.

    Uses the series P(a, x) = sum_n x^(a+n) e^(-x) / Gamma(a+n+1), differentiated
    term by term. Entries far in the upper tail (P == 1 to double precision)
    get an exact zero.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    a = float(a)
    tail = x > a + 40.0 + 12.0 * np.sqrt(a + 1.0) + 0.5 * a
    live = (x > 0) & ~tail
    if not live.any():
        return out
    xs = x[live]
    xmax = float(xs.max())
    # beyond n ~ x the terms fall off like a Poisson(x) tail
    n_terms = int(np.ceil(xmax + 8.0 * np.sqrt(xmax + 1.0) + 20.0))
    n = np.arange(n_terms, dtype=float)
    lg = special.gammaln(a + n + 1.0)
    dg = special.digamma(a + n + 1.0)
    lx = np.log(xs)[:, None]
    log_terms = (a + n) * lx - xs[:, None] - lg
    out[live] = np.sum(np.exp(log_terms) * (lx - dg), axis=1)
    return out


def gammainc(a, x):
    """Regularized lower incomplete gamma P(a, x), differentiable in both arguments.

    ``a`` must be a scalar (float or scalar :class:`Var`); ``x`` may be an array.
    """
    tape = _tape_of(a, x)
    av, xv = value_of(a), value_of(x)
    if np.ndim(av) != 0:
        raise CapabilityError("gammainc supports a scalar shape argument only")
    out = special.gammainc(av, xv)
    if tape is None:
        return out
    sa, sx = np.shape(av), np.shape(xv)
    edges: tuple = ()
    if isinstance(x, Var):
        dens = np.exp((av - 1.0) * np.log(xv) - xv - special.gammaln(av))
        edges += ((x.index, lambda g: _unbroadcast(g * dens, sx)),)
    if isinstance(a, Var):
        dshape = _gammainc_dshape(float(av), np.broadcast_to(xv, out.shape))
        edges += ((a.index, lambda g: _unbroadcast(g * dshape, sa)),)
    return tape.record(out, "gammainc", edges)


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.negative: neg,
    np.power: power,
    np.exp: exp,
    np.log: log,
    np.log1p: log1p,
    np.sqrt: sqrt,
    np.square: square,
    special.expit: logistic,
}

_FUNCTIONS = {
    np.sum: sum,
    np.concatenate: concatenate,
}


def grad(f: Callable, x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``x`` and its gradient by one reverse sweep.

    Raises
    ------
    EvaluationError
        If any intermediate value (or the gradient) is not finite; the message
        carries the offending tape node index.
    CapabilityError
        If ``f`` applies an operation the tape does not support.
    """
    x = np.array(x, dtype=float)
    tape = Tape()
    xv = tape.input(x)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        out = f(xv)
        if not isinstance(out, Var):
            value = float(out)
            if not np.isfinite(value):
                raise EvaluationError("non-finite function value")
            return value, np.zeros_like(x)
        if out.value.shape != ():
            raise CapabilityError(f"grad needs a scalar output, got shape {out.value.shape}")
        adjoints = tape.backward(out)
    g = adjoints[xv.index]
    g = np.zeros_like(x) if g is None else np.array(g, dtype=float).reshape(x.shape)
    if not np.isfinite(g).all():
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise EvaluationError(f"non-finite gradient in coordinate {bad}")
    return float(out.value), g
