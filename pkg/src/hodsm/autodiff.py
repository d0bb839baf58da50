"""A small define-by-run autodiff engine for nested input derivatives.

Reverse mode runs over a :class:`Tape` of recorded :class:`Tensor` nodes.
Forward mode uses :class:`Dual` numbers whose primal and tangent parts are
ordinary graph nodes, so a Jacobian-vector product built here stays
differentiable by :func:`grad`. Backward rules are written with the same
public ops, which makes ``grad(..., create_graph=True)`` differentiable too.

Duals nest by tag: a dual with a higher tag may hold lower-tagged duals as
its parts, never the other way round. :func:`jvp` allocates fresh tags.
"""

from __future__ import annotations

import functools
import itertools
import threading
from contextlib import contextmanager, nullcontext

import numpy as np

_state = threading.local()
_tags = itertools.count(1)


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_record():
    """Evaluate ops on plain values without adding nodes to any tape."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class _Ops:
    __slots__ = ()
    __array_priority__ = 1000.0

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
        if np.isscalar(o):
            return mul(self, 1.0 / o)
        return mul(self, reciprocal(o))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, k):
        if k != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    @property
    def ndim(self) -> int:
        return len(self.shape)


class Tensor(_Ops):
    """A value node. ``tape is None`` marks an untracked constant."""

    __slots__ = ("value", "parents", "backward", "tape", "index", "op")

    def __init__(self, value, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = ()
        self.backward = None
        self.tape = tape
        self.index = -1
        self.op = "const"

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, tracked={self.tracked})"


class Tape:
    """Append-only node list in creation (hence topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def leaf(self, value) -> Tensor:
        t = Tensor(value, tape=self)
        t.op = "leaf"
        t.index = len(self.nodes)
        self.nodes.append(t)
        self.leaves.append(t)
        return t

    def __len__(self):
        return len(self.nodes)


class Dual(_Ops):
    """``primal + eps * tangent`` with ``eps**2 = 0``; ``tangent=None`` means zero."""

    __slots__ = ("primal", "tangent", "tag")

    def __init__(self, primal, tangent, tag: int):
        self.primal = primal
        self.tangent = tangent
        self.tag = tag

    @property
    def shape(self):
        return _shape(self.primal)


def new_tag() -> int:
    return next(_tags)


def _shape(a):
    if isinstance(a, (Tensor, Dual)):
        return a.shape
    return np.shape(a)


def _as_tensor(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(a)


def value_of(a) -> np.ndarray:
    """Innermost primal value of a tensor, dual or array."""
    while isinstance(a, Dual):
        a = a.primal
    return a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def _make(value, parents, op) -> Tensor:
    tape = None
    if _recording():
        for p in parents:
            if p.tape is not None:
                if tape is None:
                    tape = p.tape
                elif p.tape is not tape:
                    raise ValueError("operands are recorded on different tapes")
    out = Tensor(value)
    if tape is not None:
        out.parents = parents
        out.op = op
        out.tape = tape
        out.index = len(tape.nodes)
        tape.nodes.append(out)
    return out


def _dual(primal, tangent, tag):
    if tangent is None:
        return primal
    shp = _shape(primal)
    if _shape(tangent) != shp:
        tangent = broadcast_to(tangent, shp)
    return Dual(primal, tangent, tag)


def _top_tag(*xs) -> int:
    return max((x.tag for x in xs if isinstance(x, Dual)), default=0)


def _split(a, tag):
    if isinstance(a, Dual) and a.tag == tag:
        return a.primal, a.tangent
    return a, None


def _np_sum_to(v: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and v.shape[i + lead] != 1
    )
    return v.sum(axis=axes, keepdims=True).reshape(shape)


# -- linear primitives ------------------------------------------------------


def _linear(fn):
    @functools.wraps(fn)
    def wrapper(a, *args, **kw):
        if isinstance(a, Dual):
            t = None if a.tangent is None else wrapper(a.tangent, *args, **kw)
            return _dual(wrapper(a.primal, *args, **kw), t, a.tag)
        return fn(_as_tensor(a), *args, **kw)

    return wrapper


@_linear
def neg(a):
    out = _make(-a.value, (a,), "neg")
    if out.tracked:
        out.backward = lambda g, needs: (neg(g),)
    return out


@_linear
def transpose(a):
    """Swap the last two axes."""
    out = _make(np.swapaxes(a.value, -1, -2), (a,), "transpose")
    if out.tracked:
        out.backward = lambda g, needs: (transpose(g),)
    return out


@_linear
def reshape(a, shape):
    shape = tuple(shape)
    out = _make(a.value.reshape(shape), (a,), "reshape")
    if out.tracked:
        in_shape = a.shape
        out.backward = lambda g, needs: (reshape(g, in_shape),)
    return out


@_linear
def broadcast_to(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _make(np.broadcast_to(a.value, shape).copy(), (a,), "broadcast_to")
    if out.tracked:
        in_shape = a.shape
        out.backward = lambda g, needs: (sum_to(g, in_shape),)
    return out


@_linear
def sum_to(a, shape):
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _make(_np_sum_to(a.value, shape), (a,), "sum_to")
    if out.tracked:
        in_shape = a.shape
        out.backward = lambda g, needs: (broadcast_to(g, in_shape),)
    return out


@_linear
def sum(a, axis=None, keepdims=False):  # noqa: A001
    out = _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.tracked:
        in_shape = a.shape
        if axis is None or keepdims:
            kept = tuple(1 for _ in in_shape) if axis is None else np.sum(a.value, axis=axis, keepdims=True).shape
        else:
            kept = np.sum(a.value, axis=axis, keepdims=True).shape
        out.backward = lambda g, needs: (broadcast_to(reshape(g, kept), in_shape),)
    return out


@_linear
def getitem(a, idx):
    out = _make(a.value[idx], (a,), "getitem")
    if out.tracked:
        in_shape = a.shape
        out.backward = lambda g, needs: (scatter(g, idx, in_shape),)
    return out


@_linear
def scatter(a, idx, shape):
    """Zeros of ``shape`` with ``a`` added at ``idx``; adjoint of :func:`getitem`."""
    buf = np.zeros(shape)
    np.add.at(buf, idx, a.value)
    out = _make(buf, (a,), "scatter")
    if out.tracked:
        out.backward = lambda g, needs: (getitem(g, idx),)
    return out


def concat(xs, axis=-1):
    tag = _top_tag(*xs)
    if tag:
        parts = [_split(x, tag) for x in xs]
        if all(t is None for _, t in parts):
            tangent = None
        else:
            tangent = concat([np.zeros(_shape(p)) if t is None else t for p, t in parts], axis)
        return _dual(concat([p for p, _ in parts], axis), tangent, tag)
    xs = [_as_tensor(x) for x in xs]
    out = _make(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), "concat")
    if out.tracked:
        ax = axis % out.value.ndim
        bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

        def backward(g, needs):
            res = []
            for k, nd in enumerate(needs):
                if not nd:
                    res.append(None)
                    continue
                idx = (slice(None),) * ax + (slice(int(bounds[k]), int(bounds[k + 1])),)
                res.append(getitem(g, idx))
            return tuple(res)

        out.backward = backward
    return out


# -- binary primitives ------------------------------------------------------


def _opt_add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def add(a, b):
    tag = _top_tag(a, b)
    if tag:
        ap, at = _split(a, tag)
        bp, bt = _split(b, tag)
        return _dual(add(ap, bp), _opt_add(at, bt), tag)
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.value + b.value, (a, b), "add")
    if out.tracked:
        sa, sb = a.shape, b.shape
        out.backward = lambda g, needs: (
            sum_to(g, sa) if needs[0] else None,
            sum_to(g, sb) if needs[1] else None,
        )
    return out


def sub(a, b):
    tag = _top_tag(a, b)
    if tag:
        ap, at = _split(a, tag)
        bp, bt = _split(b, tag)
        if bt is None:
            t = at
        elif at is None:
            t = neg(bt)
        else:
            t = sub(at, bt)
        return _dual(sub(ap, bp), t, tag)
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.value - b.value, (a, b), "sub")
    if out.tracked:
        sa, sb = a.shape, b.shape
        out.backward = lambda g, needs: (
            sum_to(g, sa) if needs[0] else None,
            sum_to(neg(g), sb) if needs[1] else None,
        )
    return out


def mul(a, b):
    tag = _top_tag(a, b)
    if tag:
        ap, at = _split(a, tag)
        bp, bt = _split(b, tag)
        t1 = None if at is None else mul(at, bp)
        t2 = None if bt is None else mul(ap, bt)
        return _dual(mul(ap, bp), _opt_add(t1, t2), tag)
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.value * b.value, (a, b), "mul")
    if out.tracked:
        out.backward = lambda g, needs: (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )
    return out


def matmul(a, b):
    tag = _top_tag(a, b)
    if tag:
        ap, at = _split(a, tag)
        bp, bt = _split(b, tag)
        t1 = None if at is None else matmul(at, bp)
        t2 = None if bt is None else matmul(ap, bt)
        return _dual(matmul(ap, bp), _opt_add(t1, t2), tag)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands need at least two axes")
    out = _make(a.value @ b.value, (a, b), "matmul")
    if out.tracked:
        out.backward = lambda g, needs: (
            sum_to(matmul(g, transpose(b)), a.shape) if needs[0] else None,
            sum_to(matmul(transpose(a), g), b.shape) if needs[1] else None,
        )
    return out


# -- elementwise nonlinear primitives ---------------------------------------


def _elementwise(deriv):
    """``deriv(x, y)`` gives the pointwise derivative from input ``x`` and output ``y``."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(a):
            if isinstance(a, Dual):
                y = wrapper(a.primal)
                t = None if a.tangent is None else mul(a.tangent, deriv(a.primal, y))
                return _dual(y, t, a.tag)
            a = _as_tensor(a)
            out = fn(a)
            if out.tracked:
                out.backward = lambda g, needs: (mul(g, deriv(a, out)),)
            return out

        return wrapper

    return deco


@_elementwise(lambda x, y: y)
def exp(a):
    return _make(np.exp(a.value), (a,), "exp")


@_elementwise(lambda x, y: reciprocal(x))
def log(a):
    return _make(np.log(a.value), (a,), "log")


@_elementwise(lambda x, y: cos(x))
def sin(a):
    return _make(np.sin(a.value), (a,), "sin")


@_elementwise(lambda x, y: neg(sin(x)))
def cos(a):
    return _make(np.cos(a.value), (a,), "cos")


@_elementwise(lambda x, y: sub(1.0, mul(y, y)))
def tanh(a):
    return _make(np.tanh(a.value), (a,), "tanh")


@_elementwise(lambda x, y: mul(y, sub(1.0, y)))
def sigmoid(a):
    # tanh form is stable for large |x| and cheaper than exp + divide
    return _make(0.5 + 0.5 * np.tanh(0.5 * a.value), (a,), "sigmoid")


@_elementwise(lambda x, y: neg(mul(y, y)))
def reciprocal(a):
    return _make(1.0 / a.value, (a,), "reciprocal")


# -- composites -------------------------------------------------------------


def _sigmoid_poly(k: int) -> np.ndarray:
    """Coefficients (low to high) of the k-th sigmoid derivative as a polynomial in sigmoid."""
    c = np.array([0.0, 1.0])
    for _ in range(k):
        dc = np.polynomial.polynomial.polyder(c)
        c = np.polynomial.polynomial.polymul(dc, [0.0, 1.0, -1.0])
    return c


@functools.lru_cache(maxsize=None)
def _swish_coefs(k: int):
    return _sigmoid_poly(k), _sigmoid_poly(k - 1) if k > 0 else None


def _swish_np(x: np.ndarray, k: int) -> np.ndarray:
    # f^(k)(x) = x * sig^(k)(x) + k * sig^(k-1)(x) for f(x) = x * sig(x)
    sg = 0.5 + 0.5 * np.tanh(0.5 * x)
    ck, cm = _swish_coefs(k)
    val = x * np.polynomial.polynomial.polyval(sg, ck)
    if k > 0:
        val = val + k * np.polynomial.polynomial.polyval(sg, cm)
    return val


def swish_derivative(a, k: int = 0):
    """The k-th derivative of ``x * sigmoid(x)``, differentiable to any order."""
    if isinstance(a, Dual):
        y = swish_derivative(a.primal, k)
        t = None if a.tangent is None else mul(a.tangent, swish_derivative(a.primal, k + 1))
        return _dual(y, t, a.tag)
    a = _as_tensor(a)
    out = _make(_swish_np(a.value, k), (a,), f"swish{k}")
    if out.tracked:
        out.backward = lambda g, needs: (mul(g, swish_derivative(a, k + 1)),)
    return out


def swish(a):
    return swish_derivative(a, 0)


def square(a):
    return mul(a, a)


def sq_norm(a, axis=-1):
    return sum(mul(a, a), axis=axis)


def inner(a, b, axis=-1):
    return sum(mul(a, b), axis=axis)


def mean(a):
    return mul(sum(a), 1.0 / max(int(np.prod(_shape(a))), 1))


def stop_gradient(a) -> Tensor:
    """Untracked constant copy: zero adjoint and zero tangent at every nesting level."""
    return Tensor(value_of(a))


def logsumexp(a, axis=-1):
    top = np.max(value_of(a), axis=axis, keepdims=True)
    shifted = exp(sub(a, top))
    return add(log(sum(shifted, axis=axis)), np.squeeze(top, axis=axis))


# -- drivers ----------------------------------------------------------------


def grad(output, wrt, create_graph: bool = False):
    """Reverse-mode gradient of a scalar ``output`` with respect to tracked nodes.

    Returns a list matching ``wrt`` (or a single item if ``wrt`` is a tensor).
    Items are arrays, or graph tensors when ``create_graph`` is set.
    """
    single = isinstance(wrt, Tensor)
    wrt = [wrt] if single else list(wrt)
    if isinstance(output, Dual):
        raise TypeError("take the primal or tangent of a Dual before calling grad")
    output = _as_tensor(output)
    if output.value.size != 1:
        raise ValueError(f"output must be a scalar, got shape {output.shape}")
    tape = output.tape
    for w in wrt:
        if not isinstance(w, Tensor) or w.tape is None or w.tape is not tape:
            raise ValueError("requested leaf is not in the output's graph")
    if not wrt:
        return []
    lo = min(w.index for w in wrt)
    targets = {w.index for w in wrt}
    adj = {output.index: Tensor(np.ones_like(output.value))}
    found = {}
    with nullcontext() if create_graph else no_record():
        for i in range(output.index, lo - 1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in targets:
                found[i] = g
            node = tape.nodes[i]
            if not node.parents:
                continue
            needs = tuple(p.tape is tape and p.index >= lo for p in node.parents)
            if not any(needs):
                continue
            for p, pg, nd in zip(node.parents, node.backward(g, needs), needs):
                if nd and pg is not None:
                    prev = adj.get(p.index)
                    adj[p.index] = pg if prev is None else add(prev, pg)
    res = []
    for w in wrt:
        g = found.get(w.index)
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif g.shape != w.shape:
            g = broadcast_to(g, w.shape)
        res.append(g if create_graph else g.value)
    return res[0] if single else res


def jvp(f, x, v):
    """Return ``(f(x), (df/dx) v)`` with both parts as graph nodes."""
    if _shape(v) != _shape(x):
        raise ValueError(f"dimension mismatch: x {_shape(x)} vs v {_shape(v)}")
    tag = new_tag()
    y = f(Dual(x, _as_tensor(v) if not isinstance(v, (Tensor, Dual)) else v, tag))
    p, t = _split(y, tag)
    if t is None:
        t = Tensor(np.zeros(_shape(p)))
    return p, t


def vjp(f, x, u):
    """Return ``(f(x), u^T df/dx)``; ``x`` must be a tracked tensor, the result stays differentiable."""
    if not (isinstance(x, Tensor) and x.tracked):
        raise ValueError("vjp needs a tracked input; create it with Tape.leaf")
    y = f(x)
    if _shape(u) != _shape(y):
        raise ValueError(f"dimension mismatch: f(x) {_shape(y)} vs u {_shape(u)}")
    return y, grad(sum(mul(u, y)), x, create_graph=True)
