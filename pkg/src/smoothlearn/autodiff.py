"""Tape-based reverse-mode automatic differentiation.

Every differentiable computation is recorded eagerly on a :class:`Tape` as a
sequence of primitive nodes (:class:`Var`).  The module-level functions
(``add``, ``mul``, ``matvec``, ``solve_spd``, ...) dispatch on their inputs:
with plain numbers/arrays they compute with numpy directly, with ``Var``
operands they record a node and return a new ``Var``.  Code written against
these functions therefore runs both in fast numeric mode and in recording
mode.

Two backward entry points exist:

* :func:`backward` - numeric adjoints of a scalar loss with respect to leaf
  inputs (gradients as numpy arrays).
* :func:`jacobian_blocks` - rows of d(out)/d(inputs).  With ``lift=True`` the
  reverse pass is itself recorded on the tape, so the resulting Jacobian
  entries stay differentiable with respect to everything they depend on.
  This is what makes unrolled Gauss-Newton steps end-to-end differentiable
  without a separate derivative rule per residual.

Adjoint rules are written once against a small executor interface and are
shared by both modes.
"""

from __future__ import annotations

import heapq
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import ContractError, IndefiniteMatrixError, NumericError

__all__ = [
    "Tape",
    "Var",
    "backward",
    "jacobian_blocks",
    "value_of",
]


def _coerce(v):
    t = type(v)
    if t is np.ndarray:
        return v if v.dtype == np.float64 else v.astype(np.float64)
    if t is np.float64:
        return v
    if t is float or t is int:
        return np.float64(v)
    return np.asarray(v, dtype=np.float64)


def value_of(x):
    """Numeric value of a Var or a plain array/scalar."""
    return x.value if isinstance(x, Var) else _coerce(x)


class Var:
    """One node of a tape: a value plus the primitive that produced it."""

    __slots__ = ("tape", "idx", "value", "rule", "parents", "ctx", "tracked")

    def __init__(self, tape, idx, value, rule, parents, ctx, tracked):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.rule = rule
        self.parents = parents
        self.ctx = ctx
        self.tracked = tracked

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(idx={self.idx}, rule={self.rule}, shape={self.value.shape})"

    # Operator sugar; dispatches through the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of primitive operations.

    Nodes are topologically ordered by construction.  A tape is single-writer;
    concurrent work should use one tape per work item.
    """

    __slots__ = ("nodes", "check_finite", "_scalar_consts")

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Var] = []
        self.check_finite = check_finite
        self._scalar_consts: dict[float, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def input(self, value) -> Var:
        """A leaf whose adjoint will be reported by backward passes."""
        return self._append(_coerce(value), None, (), None, True)

    def constant(self, value) -> Var:
        """A leaf treated as a constant (no adjoint propagated into it)."""
        if isinstance(value, (int, float)):
            cached = self._scalar_consts.get(value)
            if cached is not None:
                return cached
            v = self._append(_coerce(value), None, (), None, False)
            self._scalar_consts[value] = v
            return v
        return self._append(_coerce(value), None, (), None, False)

    def _append(self, value, rule, parents, ctx, tracked) -> Var:
        v = Var(self, len(self.nodes), value, rule, parents, ctx, tracked)
        self.nodes.append(v)
        return v

    def _record(self, rule, value, parents, ctx=None) -> Var:
        value = _coerce(value)
        if self.check_finite:
            if value.ndim == 0:
                v = float(value)
                if v != v or v in (float("inf"), float("-inf")):
                    raise NumericError(
                        f"primitive '{rule}' produced a non-finite value"
                    )
            elif not np.isfinite(value).all():
                raise NumericError(f"primitive '{rule}' produced a non-finite value")
        tracked = False
        for p in parents:
            if p.tracked:
                tracked = True
                break
        return self._append(value, rule, parents, ctx, tracked)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _lift(t: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not t:
            raise ContractError("operands recorded on different tapes")
        return x
    return t.constant(x)


def _check_ew(a, b, name):
    sa, sb = a.shape, b.shape
    if sa != sb and sa != () and sb != ():
        raise ContractError(f"{name}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.add(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_ew(a.value, b.value, "add")
    return t._record("add", a.value + b.value, (a, b))


def sub(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.subtract(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_ew(a.value, b.value, "sub")
    return t._record("sub", a.value - b.value, (a, b))


def mul(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.multiply(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_ew(a.value, b.value, "mul")
    return t._record("mul", a.value * b.value, (a, b))


def div(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.divide(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _check_ew(a.value, b.value, "div")
    return t._record("div", a.value / b.value, (a, b))


def neg(a):
    if not isinstance(a, Var):
        return np.negative(a)
    return a.tape._record("neg", -a.value, (a,))


def _unary(name, fn):
    def op(a):
        if not isinstance(a, Var):
            return fn(a)
        return a.tape._record(name, fn(a.value), (a,))

    op.__name__ = name
    return op


exp = _unary("exp", np.exp)
log = _unary("log", np.log)
sqrt = _unary("sqrt", np.sqrt)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
tanh = _unary("tanh", np.tanh)
absval = _unary("absval", np.abs)


def relu(a):
    if not isinstance(a, Var):
        return np.maximum(a, 0.0)
    return a.tape._record("relu", np.maximum(a.value, 0.0), (a,))


def atan2(y, x):
    t = _tape_of(y, x)
    if t is None:
        return np.arctan2(y, x)
    y, x = _lift(t, y), _lift(t, x)
    return t._record("atan2", np.arctan2(y.value, x.value), (y, x))


def square(a):
    return mul(a, a)


def vsum(a):
    """Sum of all entries, returning a scalar."""
    if not isinstance(a, Var):
        return np.sum(a)
    return a.tape._record("vsum", np.sum(a.value), (a,))


def bcast(a, shape):
    """Broadcast a scalar to the given shape (adjoint: sum)."""
    if not isinstance(a, Var):
        return np.full(shape, a, dtype=np.float64)
    if a.value.shape != ():
        raise ContractError("bcast expects a scalar")
    return a.tape._record("bcast", np.full(shape, a.value), (a,))


def dot(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.dot(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.shape != b.value.shape or a.value.ndim != 1:
        raise ContractError("dot expects two equally sized vectors")
    return t._record("dot", np.dot(a.value, b.value), (a, b))


def matvec(a, x):
    t = _tape_of(a, x)
    if t is None:
        return np.asarray(a) @ np.asarray(x)
    a, x = _lift(t, a), _lift(t, x)
    if a.value.ndim != 2 or x.value.ndim != 1 or a.value.shape[1] != x.value.shape[0]:
        raise ContractError(
            f"matvec: incompatible shapes {a.value.shape} and {x.value.shape}"
        )
    return t._record("matvec", a.value @ x.value, (a, x))


def matmul(a, b):
    t = _tape_of(a, b)
    if t is None:
        return np.asarray(a) @ np.asarray(b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ContractError(
            f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}"
        )
    return t._record("matmul", a.value @ b.value, (a, b))


def transpose(a):
    if not isinstance(a, Var):
        return np.asarray(a).T
    return a.tape._record("transpose", a.value.T.copy(), (a,))


def outer(u, v):
    t = _tape_of(u, v)
    if t is None:
        return np.outer(u, v)
    u, v = _lift(t, u), _lift(t, v)
    if u.value.ndim != 1 or v.value.ndim != 1:
        raise ContractError("outer expects two vectors")
    return t._record("outer", np.outer(u.value, v.value), (u, v))


def getitem(a, key):
    if not isinstance(a, Var):
        return np.asarray(a)[key]
    return a.tape._record("getitem", a.value[key], (a,), (key, a.value.shape))


def scatter(a, key, shape):
    """Place ``a`` into a zero array of ``shape`` at ``key``."""
    if not isinstance(a, Var):
        out = np.zeros(shape)
        out[key] = a
        return out
    out = np.zeros(shape)
    out[key] = a.value
    return a.tape._record("scatter", out, (a,), (key, shape))


def stack(parts: Sequence):
    """Stack equally shaped parts along a new leading axis."""
    t = _tape_of(*parts)
    if t is None:
        return np.stack([_coerce(p) for p in parts])
    lifted = tuple(_lift(t, p) for p in parts)
    shape0 = lifted[0].value.shape
    for p in lifted:
        if p.value.shape != shape0:
            raise ContractError("stack expects equally shaped parts")
    return t._record("stack", np.stack([p.value for p in lifted]), lifted)


def concat(parts: Sequence):
    """Concatenate 1-D vectors."""
    t = _tape_of(*parts)
    if t is None:
        return np.concatenate([np.atleast_1d(_coerce(p)) for p in parts])
    lifted = tuple(_lift(t, p) for p in parts)
    offsets = []
    off = 0
    for p in lifted:
        if p.value.ndim != 1:
            raise ContractError("concat expects 1-D vectors")
        offsets.append(off)
        off += p.value.shape[0]
    value = np.concatenate([p.value for p in lifted])
    return t._record("concat", value, lifted, tuple(offsets))


def scale_rows(m, w):
    """Multiply row i of matrix ``m`` by ``w[i]``."""
    t = _tape_of(m, w)
    if t is None:
        return np.asarray(m) * np.asarray(w)[:, None]
    m, w = _lift(t, m), _lift(t, w)
    if m.value.ndim != 2 or w.value.shape != (m.value.shape[0],):
        raise ContractError("scale_rows: shape mismatch")
    return t._record("scale_rows", m.value * w.value[:, None], (m, w))


def scale_cols(m, v):
    """Multiply column j of matrix ``m`` by ``v[j]``."""
    t = _tape_of(m, v)
    if t is None:
        return np.asarray(m) * np.asarray(v)
    m, v = _lift(t, m), _lift(t, v)
    if m.value.ndim != 2 or v.value.shape != (m.value.shape[1],):
        raise ContractError("scale_cols: shape mismatch")
    return t._record("scale_cols", m.value * v.value, (m, v))


def rowsum(m):
    if not isinstance(m, Var):
        return np.asarray(m).sum(axis=1)
    return m.tape._record("rowsum", m.value.sum(axis=1), (m,))


def colsum(m):
    if not isinstance(m, Var):
        return np.asarray(m).sum(axis=0)
    return m.tape._record("colsum", m.value.sum(axis=0), (m,))


def bcast_row(v, m):
    """Tile vector ``v`` into an (m, len(v)) matrix."""
    if not isinstance(v, Var):
        return np.tile(np.asarray(v)[None, :], (m, 1))
    return v.tape._record("bcast_row", np.tile(v.value[None, :], (m, 1)), (v,), m)


def bcast_col(v, n):
    """Tile vector ``v`` into an (len(v), n) matrix."""
    if not isinstance(v, Var):
        return np.tile(np.asarray(v)[:, None], (1, n))
    return v.tape._record("bcast_col", np.tile(v.value[:, None], (1, n)), (v,), n)


def diagmat(v):
    if not isinstance(v, Var):
        return np.diag(np.asarray(v))
    return v.tape._record("diagmat", np.diag(v.value), (v,))


def diagonal(m):
    if not isinstance(m, Var):
        return np.diagonal(np.asarray(m)).copy()
    return m.tape._record("diagonal", np.diagonal(m.value).copy(), (m,))


def _cho_factor(a):
    try:
        return scipy.linalg.cho_factor(a, lower=True)
    except scipy.linalg.LinAlgError as e:
        raise IndefiniteMatrixError(f"matrix is not positive definite: {e}") from e


def solve_spd(a, b):
    """Solve a @ x = b for symmetric positive definite ``a``.

    ``b`` may be a vector or a matrix of stacked right-hand sides.  The
    adjoint rule solves with the same matrix: given xbar, lam = a^-1 xbar,
    bbar += lam and abar -= lam x^T.
    """
    t = _tape_of(a, b)
    if t is None:
        return scipy.linalg.cho_solve(_cho_factor(np.asarray(a)), np.asarray(b))
    a, b = _lift(t, a), _lift(t, b)
    factor = _cho_factor(a.value)
    x = scipy.linalg.cho_solve(factor, b.value)
    return t._record("solve_spd", x, (a, b), {"factor": factor})


def chain_solve(g, blocks, placements, resolver_factory, dim):
    """Solve H @ x = g where H is assembled from placed dense blocks.

    ``placements`` is a sequence of (row_offset, col_offset) pairs aligned
    with ``blocks``; every stored block is placed exactly once, so symmetric
    off-diagonal blocks must be passed twice (the second one transposed).
    ``resolver_factory(H)`` returns a callable solving H @ x = rhs; it is
    reused by the adjoint rule.
    """
    t = _tape_of(g, *blocks)
    if t is None:
        h = _assemble_dense(dim, placements, [np.asarray(b) for b in blocks])
        return resolver_factory(h)(np.asarray(g))
    g = _lift(t, g)
    blocks = tuple(_lift(t, b) for b in blocks)
    h = _assemble_dense(dim, placements, [b.value for b in blocks])
    resolve = resolver_factory(h)
    x = resolve(g.value)
    ctx = {
        "placements": tuple(placements),
        "resolve": resolve,
        "factory": resolver_factory,
        "dim": dim,
    }
    return t._record("chain_solve", x, (g,) + blocks, ctx)


def _assemble_dense(dim, placements, block_values):
    h = np.zeros((dim, dim))
    for (r0, c0), bv in zip(placements, block_values):
        m, n = bv.shape
        h[r0 : r0 + m, c0 : c0 + n] += bv
    return h


# ---------------------------------------------------------------------------
# Adjoint rules
# ---------------------------------------------------------------------------
#
# Rules receive the output adjoint ``bar``, the node, an executor ``E`` and a
# per-parent ``needs`` mask; they return one contribution per parent (None
# when not needed).  In plain mode ``E`` computes with numpy; in lift mode it
# records new nodes, which keeps the produced adjoints differentiable.


class _PlainExec:
    lift = False

    @staticmethod
    def v(p):
        return p.value

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    div = staticmethod(np.divide)
    neg = staticmethod(np.negative)
    exp = staticmethod(np.exp)
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    vsum = staticmethod(np.sum)

    @staticmethod
    def bcast(a, shape):
        return np.full(shape, a)

    @staticmethod
    def matvec(a, x):
        return a @ x

    matmul = staticmethod(np.matmul)

    @staticmethod
    def transpose(a):
        return a.T

    outer = staticmethod(np.outer)

    @staticmethod
    def getitem(a, key):
        return a[key]

    @staticmethod
    def scatter(a, key, shape):
        out = np.zeros(shape)
        out[key] = a
        return out

    @staticmethod
    def scale_rows(m, w):
        return m * w[:, None]

    @staticmethod
    def scale_cols(m, v):
        return m * v

    @staticmethod
    def rowsum(m):
        return m.sum(axis=1)

    @staticmethod
    def colsum(m):
        return m.sum(axis=0)

    @staticmethod
    def bcast_col(v, n):
        return np.tile(v[:, None], (1, n))

    @staticmethod
    def bcast_row(v, m):
        return np.tile(v[None, :], (m, 1))

    diagmat = staticmethod(np.diag)

    @staticmethod
    def diagonal(m):
        return np.diagonal(m).copy()


class _LiftExec:
    lift = True

    @staticmethod
    def v(p):
        return p


for _name in (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "sin",
    "cos",
    "vsum",
    "bcast",
    "matvec",
    "matmul",
    "transpose",
    "outer",
    "getitem",
    "scatter",
    "scale_rows",
    "scale_cols",
    "rowsum",
    "colsum",
    "bcast_col",
    "bcast_row",
    "diagmat",
    "diagonal",
):
    setattr(_LiftExec, _name, staticmethod(globals()[_name]))

_PLAIN = _PlainExec()
_LIFT = _LiftExec()


def _reduce_to(E, x, target_shape):
    if x is None:
        return None
    if x.shape == target_shape:
        return x
    if target_shape == ():
        return E.vsum(x)
    raise ContractError("internal: cannot reduce adjoint shape")


def _r_add(bar, node, E, needs):
    a, b = node.parents
    ga = _reduce_to(E, bar, a.value.shape) if needs[0] else None
    gb = _reduce_to(E, bar, b.value.shape) if needs[1] else None
    return ga, gb


def _r_sub(bar, node, E, needs):
    a, b = node.parents
    ga = _reduce_to(E, bar, a.value.shape) if needs[0] else None
    gb = _reduce_to(E, E.neg(bar), b.value.shape) if needs[1] else None
    return ga, gb


def _r_mul(bar, node, E, needs):
    a, b = node.parents
    ga = _reduce_to(E, E.mul(bar, E.v(b)), a.value.shape) if needs[0] else None
    gb = _reduce_to(E, E.mul(bar, E.v(a)), b.value.shape) if needs[1] else None
    return ga, gb


def _r_div(bar, node, E, needs):
    a, b = node.parents
    ga = _reduce_to(E, E.div(bar, E.v(b)), a.value.shape) if needs[0] else None
    gb = None
    if needs[1]:
        gb = _reduce_to(
            E, E.neg(E.div(E.mul(bar, E.v(node)), E.v(b))), b.value.shape
        )
    return ga, gb


def _r_neg(bar, node, E, needs):
    return (E.neg(bar),)


def _r_exp(bar, node, E, needs):
    return (E.mul(bar, E.v(node)),)


def _r_log(bar, node, E, needs):
    return (E.div(bar, E.v(node.parents[0])),)


def _r_sqrt(bar, node, E, needs):
    return (E.div(E.mul(bar, 0.5), E.v(node)),)


def _r_sin(bar, node, E, needs):
    return (E.mul(bar, E.cos(E.v(node.parents[0]))),)


def _r_cos(bar, node, E, needs):
    return (E.neg(E.mul(bar, E.sin(E.v(node.parents[0])))),)


def _r_tanh(bar, node, E, needs):
    one_minus = E.sub(1.0, E.mul(E.v(node), E.v(node)))
    return (E.mul(bar, one_minus),)


def _r_relu(bar, node, E, needs):
    mask = (node.parents[0].value > 0.0).astype(np.float64)
    return (E.mul(bar, mask),)


def _r_absval(bar, node, E, needs):
    return (E.mul(bar, np.sign(node.parents[0].value)),)


def _r_atan2(bar, node, E, needs):
    y, x = node.parents
    den = E.add(E.mul(E.v(x), E.v(x)), E.mul(E.v(y), E.v(y)))
    gy = E.div(E.mul(bar, E.v(x)), den) if needs[0] else None
    gx = E.neg(E.div(E.mul(bar, E.v(y)), den)) if needs[1] else None
    return gy, gx


def _r_vsum(bar, node, E, needs):
    return (E.bcast(bar, node.parents[0].value.shape),)


def _r_bcast(bar, node, E, needs):
    return (E.vsum(bar),)


def _r_dot(bar, node, E, needs):
    a, b = node.parents
    ga = E.mul(bar, E.v(b)) if needs[0] else None
    gb = E.mul(bar, E.v(a)) if needs[1] else None
    return ga, gb


def _r_matvec(bar, node, E, needs):
    a, x = node.parents
    ga = E.outer(bar, E.v(x)) if needs[0] else None
    gx = E.matvec(E.transpose(E.v(a)), bar) if needs[1] else None
    return ga, gx


def _r_matmul(bar, node, E, needs):
    a, b = node.parents
    ga = E.matmul(bar, E.transpose(E.v(b))) if needs[0] else None
    gb = E.matmul(E.transpose(E.v(a)), bar) if needs[1] else None
    return ga, gb


def _r_transpose(bar, node, E, needs):
    return (E.transpose(bar),)


def _r_outer(bar, node, E, needs):
    u, v = node.parents
    gu = E.matvec(bar, E.v(v)) if needs[0] else None
    gv = E.matvec(E.transpose(bar), E.v(u)) if needs[1] else None
    return gu, gv


def _r_getitem(bar, node, E, needs):
    key, shape = node.ctx
    return (E.scatter(bar, key, shape),)


def _r_scatter(bar, node, E, needs):
    key, _shape = node.ctx
    return (E.getitem(bar, key),)


def _r_stack(bar, node, E, needs):
    return tuple(
        E.getitem(bar, i) if needs[i] else None for i in range(len(node.parents))
    )


def _r_concat(bar, node, E, needs):
    offsets = node.ctx
    out = []
    for i, p in enumerate(node.parents):
        if needs[i]:
            sl = slice(offsets[i], offsets[i] + p.value.shape[0])
            out.append(E.getitem(bar, sl))
        else:
            out.append(None)
    return tuple(out)


def _r_scale_rows(bar, node, E, needs):
    m, w = node.parents
    gm = E.scale_rows(bar, E.v(w)) if needs[0] else None
    gw = E.rowsum(E.mul(bar, E.v(m))) if needs[1] else None
    return gm, gw


def _r_scale_cols(bar, node, E, needs):
    m, v = node.parents
    gm = E.scale_cols(bar, E.v(v)) if needs[0] else None
    gv = E.colsum(E.mul(bar, E.v(m))) if needs[1] else None
    return gm, gv


def _r_rowsum(bar, node, E, needs):
    n = node.parents[0].value.shape[1]
    return (E.bcast_col(bar, n),)


def _r_bcast_col(bar, node, E, needs):
    return (E.rowsum(bar),)


def _r_colsum(bar, node, E, needs):
    m = node.parents[0].value.shape[0]
    return (E.bcast_row(bar, m),)


def _r_bcast_row(bar, node, E, needs):
    return (E.colsum(bar),)


def _r_diagmat(bar, node, E, needs):
    return (E.diagonal(bar),)


def _r_diagonal(bar, node, E, needs):
    return (E.diagmat(bar),)


def _r_solve_spd(bar, node, E, needs):
    a, b = node.parents
    if E.lift:
        lam = solve_spd(a, bar)
    else:
        lam = scipy.linalg.cho_solve(node.ctx["factor"], bar)
    gb = lam if needs[1] else None
    ga = None
    if needs[0]:
        x = E.v(node)
        if node.value.ndim == 1:
            ga = E.neg(E.outer(lam, x))
        else:
            ga = E.neg(E.matmul(lam, E.transpose(x)))
    return ga, gb


def _r_chain_solve(bar, node, E, needs):
    ctx = node.ctx
    parents = node.parents
    if E.lift:
        lam = chain_solve(
            bar, parents[1:], ctx["placements"], ctx["factory"], ctx["dim"]
        )
    else:
        lam = ctx["resolve"](bar)
    out = [lam if needs[0] else None]
    x = E.v(node)
    for k, (r0, c0) in enumerate(ctx["placements"]):
        if not needs[k + 1]:
            out.append(None)
            continue
        m, n = parents[k + 1].value.shape
        lam_i = E.getitem(lam, slice(r0, r0 + m))
        x_j = E.getitem(x, slice(c0, c0 + n))
        out.append(E.neg(E.outer(lam_i, x_j)))
    return tuple(out)


_RULES: dict[str, Callable] = {
    "add": _r_add,
    "sub": _r_sub,
    "mul": _r_mul,
    "div": _r_div,
    "neg": _r_neg,
    "exp": _r_exp,
    "log": _r_log,
    "sqrt": _r_sqrt,
    "sin": _r_sin,
    "cos": _r_cos,
    "tanh": _r_tanh,
    "relu": _r_relu,
    "absval": _r_absval,
    "atan2": _r_atan2,
    "vsum": _r_vsum,
    "bcast": _r_bcast,
    "dot": _r_dot,
    "matvec": _r_matvec,
    "matmul": _r_matmul,
    "transpose": _r_transpose,
    "outer": _r_outer,
    "getitem": _r_getitem,
    "scatter": _r_scatter,
    "stack": _r_stack,
    "concat": _r_concat,
    "scale_rows": _r_scale_rows,
    "scale_cols": _r_scale_cols,
    "rowsum": _r_rowsum,
    "bcast_col": _r_bcast_col,
    "colsum": _r_colsum,
    "bcast_row": _r_bcast_row,
    "diagmat": _r_diagmat,
    "diagonal": _r_diagonal,
    "solve_spd": _r_solve_spd,
    "chain_solve": _r_chain_solve,
}


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------


class _ActiveUnion:
    __slots__ = ("local", "extra")

    def __init__(self, local, extra):
        self.local = local
        self.extra = extra

    def __contains__(self, idx):
        return idx in self.local or (self.extra is not None and idx in self.extra)


def _backprop(out: Var, seed, want: set, lift: bool, active=None):
    tape = out.tape
    nodes = tape.nodes
    E = _LIFT if lift else _PLAIN
    adj = {out.idx: seed}
    heap = [-out.idx]
    grads = {}
    while heap:
        i = -heapq.heappop(heap)
        bar = adj.pop(i)
        if i in want:
            grads[i] = bar
        node = nodes[i]
        parents = node.parents
        if not parents:
            continue
        if active is None:
            needs = [p.tracked for p in parents]
        else:
            needs = [p.idx in active for p in parents]
        if not any(needs):
            continue
        contribs = _RULES[node.rule](bar, node, E, needs)
        for p, c in zip(parents, contribs):
            if c is None:
                continue
            pidx = p.idx
            prev = adj.get(pidx)
            if prev is None:
                adj[pidx] = c
                heapq.heappush(heap, -pidx)
            else:
                adj[pidx] = E.add(prev, c)
    return grads


def backward(loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Numeric gradients of a scalar loss for each Var in ``wrt``.

    Leaves that the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, Var):
        raise ContractError("backward expects a Var loss")
    if loss.value.shape != ():
        raise ContractError("backward requires a scalar loss")
    grads = _backprop(loss, np.float64(1.0), {w.idx for w in wrt}, lift=False)
    out = []
    for w in wrt:
        g = grads.get(w.idx)
        if g is None:
            out.append(np.zeros(w.value.shape))
        else:
            out.append(np.asarray(g, dtype=np.float64).reshape(w.value.shape))
    return out


# ---------------------------------------------------------------------------
# Batched Jacobians
# ---------------------------------------------------------------------------
#
# For a 1-D output of size m, all m rows can be propagated in one reverse
# traversal by giving every node a batched adjoint with a leading seed axis:
# scalar nodes carry (m,), length-k vectors carry (m, k).  This covers the
# elementwise/structural primitives residuals are built from; anything else
# falls back to one backward pass per row.


class _BatchUnsupported(Exception):
    pass


class _Batch:
    """Batched-adjoint helpers over a base executor (numpy or recording)."""

    def __init__(self, base):
        self.base = base
        self.lift = base.lift

    def mul(self, bar, op):
        opshape = op.shape
        if not self.lift:
            return bar * op
        if opshape == ():
            return mul(bar, op)
        if bar.shape == (bar.shape[0],) + opshape and len(opshape) == 1:
            return scale_cols(bar, op)
        if bar.shape == opshape:
            return mul(bar, op)
        raise _BatchUnsupported

    def div(self, bar, op):
        if not self.lift:
            return bar / op
        if op.shape == ():
            return div(bar, op)
        return self.mul(bar, div(1.0, op))

    def neg(self, bar):
        return self.base.neg(bar)

    def add(self, a, b):
        return self.base.add(a, b)

    def reduce_to(self, x, parent, node):
        pshape = parent.value.shape
        if x.shape[1:] == pshape:
            return x
        if pshape == ():
            if not self.lift:
                return x.sum(axis=tuple(range(1, x.ndim)))
            if x.ndim == 2:
                return rowsum(x)
            raise _BatchUnsupported
        raise _BatchUnsupported

    def expand_last(self, bar, k):
        return self.base.bcast_col(bar, k)

    def getcol(self, x, key):
        if not self.lift:
            return x[(slice(None),) + key]
        return getitem(x, (slice(None),) + key)

    def scatter_col(self, bar, key, pshape):
        m = bar.shape[0]
        full = (m,) + pshape
        if len(full) > 2:
            raise _BatchUnsupported
        if not self.lift:
            out = np.zeros(full)
            out[(slice(None),) + key] = bar
            return out
        return scatter(bar, (slice(None),) + key, full)


def _bcontrib_elementwise(EB, bar, node, factor_val):
    return EB.mul(bar, factor_val)


def _b_add(bar, node, EB, needs):
    a, b = node.parents
    ga = EB.reduce_to(bar, a, node) if needs[0] else None
    gb = EB.reduce_to(bar, b, node) if needs[1] else None
    return ga, gb


def _b_sub(bar, node, EB, needs):
    a, b = node.parents
    ga = EB.reduce_to(bar, a, node) if needs[0] else None
    gb = EB.reduce_to(EB.neg(bar), b, node) if needs[1] else None
    return ga, gb


def _b_mul(bar, node, EB, needs):
    a, b = node.parents
    E = EB.base
    ga = EB.reduce_to(EB.mul(bar, E.v(b)), a, node) if needs[0] else None
    gb = EB.reduce_to(EB.mul(bar, E.v(a)), b, node) if needs[1] else None
    return ga, gb


def _b_div(bar, node, EB, needs):
    a, b = node.parents
    E = EB.base
    ga = EB.reduce_to(EB.div(bar, E.v(b)), a, node) if needs[0] else None
    gb = None
    if needs[1]:
        gb = EB.reduce_to(
            EB.neg(EB.div(EB.mul(bar, E.v(node)), E.v(b))), b, node
        )
    return ga, gb


def _b_neg(bar, node, EB, needs):
    return (EB.neg(bar),)


def _b_exp(bar, node, EB, needs):
    return (EB.mul(bar, EB.base.v(node)),)


def _b_log(bar, node, EB, needs):
    return (EB.div(bar, EB.base.v(node.parents[0])),)


def _b_sqrt(bar, node, EB, needs):
    E = EB.base
    return (EB.div(E.mul(bar, 0.5) if not EB.lift else mul(bar, 0.5), E.v(node)),)


def _b_sin(bar, node, EB, needs):
    E = EB.base
    return (EB.mul(bar, E.cos(E.v(node.parents[0]))),)


def _b_cos(bar, node, EB, needs):
    E = EB.base
    return (EB.neg(EB.mul(bar, E.sin(E.v(node.parents[0])))),)


def _b_tanh(bar, node, EB, needs):
    E = EB.base
    out = E.v(node)
    return (EB.mul(bar, E.sub(1.0, E.mul(out, out))),)


def _b_relu(bar, node, EB, needs):
    mask = (node.parents[0].value > 0.0).astype(np.float64)
    return (EB.mul(bar, _coerce(mask)),)


def _b_absval(bar, node, EB, needs):
    return (EB.mul(bar, _coerce(np.sign(node.parents[0].value))),)


def _b_atan2(bar, node, EB, needs):
    y, x = node.parents
    E = EB.base
    den = E.add(E.mul(E.v(x), E.v(x)), E.mul(E.v(y), E.v(y)))
    gy = EB.div(EB.mul(bar, E.v(x)), den) if needs[0] else None
    gx = EB.neg(EB.div(EB.mul(bar, E.v(y)), den)) if needs[1] else None
    return gy, gx


def _b_vsum(bar, node, EB, needs):
    shape = node.parents[0].value.shape
    if shape == ():
        return (bar,)
    if len(shape) == 1:
        return (EB.expand_last(bar, shape[0]),)
    raise _BatchUnsupported


def _b_bcast(bar, node, EB, needs):
    return (EB.reduce_to(bar, node.parents[0], node),)


def _b_dot(bar, node, EB, needs):
    a, b = node.parents
    E = EB.base
    if not EB.lift:
        ga = bar[:, None] * E.v(b) if needs[0] else None
        gb = bar[:, None] * E.v(a) if needs[1] else None
        return ga, gb
    ga = outer(bar, E.v(b)) if needs[0] else None
    gb = outer(bar, E.v(a)) if needs[1] else None
    return ga, gb


def _b_getitem(bar, node, EB, needs):
    key, shape = node.ctx
    if len(shape) != 1:
        raise _BatchUnsupported
    key_t = key if isinstance(key, tuple) else (key,)
    return (EB.scatter_col(bar, key_t, shape),)


def _b_scatter(bar, node, EB, needs):
    key, _shape = node.ctx
    key_t = key if isinstance(key, tuple) else (key,)
    return (EB.getcol(bar, key_t),)


def _b_stack(bar, node, EB, needs):
    if node.parents[0].value.shape != ():
        raise _BatchUnsupported
    return tuple(
        EB.getcol(bar, (i,)) if needs[i] else None for i in range(len(node.parents))
    )


def _b_concat(bar, node, EB, needs):
    offsets = node.ctx
    out = []
    for i, p in enumerate(node.parents):
        if needs[i]:
            sl = slice(offsets[i], offsets[i] + p.value.shape[0])
            out.append(EB.getcol(bar, (sl,)))
        else:
            out.append(None)
    return tuple(out)


def _b_matvec(bar, node, EB, needs):
    a, x = node.parents
    if needs[0]:
        raise _BatchUnsupported  # 3-D adjoint for the matrix operand
    E = EB.base
    gx = (bar @ E.v(a)) if not EB.lift else matmul(bar, E.v(a))
    return None, gx


_BRULES: dict[str, Callable] = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "div": _b_div,
    "neg": _b_neg,
    "exp": _b_exp,
    "log": _b_log,
    "sqrt": _b_sqrt,
    "sin": _b_sin,
    "cos": _b_cos,
    "tanh": _b_tanh,
    "relu": _b_relu,
    "absval": _b_absval,
    "atan2": _b_atan2,
    "vsum": _b_vsum,
    "bcast": _b_bcast,
    "dot": _b_dot,
    "getitem": _b_getitem,
    "scatter": _b_scatter,
    "stack": _b_stack,
    "concat": _b_concat,
    "matvec": _b_matvec,
}


def _batched_backprop(out: Var, seed, want: set, lift: bool, active):
    tape = out.tape
    nodes = tape.nodes
    EB = _Batch(_LIFT if lift else _PLAIN)
    adj = {out.idx: seed}
    heap = [-out.idx]
    grads = {}
    while heap:
        i = -heapq.heappop(heap)
        bar = adj.pop(i)
        if i in want:
            grads[i] = bar
        node = nodes[i]
        parents = node.parents
        if not parents:
            continue
        needs = [p.idx in active for p in parents]
        if not any(needs):
            continue
        rule = _BRULES.get(node.rule)
        if rule is None:
            raise _BatchUnsupported
        contribs = rule(bar, node, EB, needs)
        for p, c in zip(parents, contribs):
            if c is None:
                continue
            pidx = p.idx
            prev = adj.get(pidx)
            if prev is None:
                adj[pidx] = c
                heapq.heappush(heap, -pidx)
            else:
                adj[pidx] = EB.add(prev, c)
    return grads


def jacobian_blocks(
    out: Var,
    wrt: Sequence[Var],
    *,
    lift: bool = False,
    active_extra=None,
    sweep_start: int | None = None,
):
    """Jacobian d(out)/d(w) for a 1-D ``out`` and each leaf ``w`` in ``wrt``.

    Returns one (len(out), len(w)) block per entry of ``wrt``.  With
    ``lift=True`` blocks are Vars recorded on the same tape (and therefore
    differentiable); otherwise they are numpy arrays.

    ``active_extra`` optionally names node indices outside the swept range
    that already depend on ``wrt`` (used when the perturbed inputs were
    recorded earlier on a shared tape); ``sweep_start`` restricts the
    reachability sweep to nodes recorded at or after that index.
    """
    if out.value.ndim != 1:
        raise ContractError("jacobian_blocks expects a 1-D output")
    m = out.value.shape[0]
    tape = out.tape
    wrt_idx = {w.idx for w in wrt}
    start = min(w.idx for w in wrt)
    if sweep_start is not None:
        start = min(start, sweep_start)
    local = set(wrt_idx)
    nodes = tape.nodes
    for i in range(start, out.idx + 1):
        for p in nodes[i].parents:
            pidx = p.idx
            if pidx in local or (active_extra is not None and pidx in active_extra):
                local.add(i)
                break
    active = _ActiveUnion(local, active_extra)

    def _zeros(shape):
        z = np.zeros(shape)
        return tape.constant(z) if lift else z

    if out.idx not in active:
        return [_zeros((m, w.value.shape[0])) for w in wrt]

    try:
        seed = np.eye(m)
        if lift:
            seed = tape.constant(seed)
        grads = _batched_backprop(out, seed, wrt_idx, lift, active)
        return [
            grads.get(w.idx, _zeros((m, w.value.shape[0]))) for w in wrt
        ]
    except _BatchUnsupported:
        pass  # fall back to one reverse pass per output row

    row_maps = []
    for i in range(m):
        seed = np.zeros(m)
        seed[i] = 1.0
        if lift:
            seed = tape.constant(seed)
        row_maps.append(_backprop(out, seed, wrt_idx, lift=lift, active=active))

    blocks = []
    for w in wrt:
        rows = []
        for i in range(m):
            g = row_maps[i].get(w.idx)
            rows.append(g if g is not None else _zeros(w.value.shape))
        blocks.append(stack(rows) if lift else np.stack([np.asarray(r) for r in rows]))
    return blocks


def forward_active(tape: Tape, seeds: set, start: int, stop: int) -> set:
    """Indices in [start, stop) reachable from ``seeds`` through parents."""
    active = set(seeds)
    nodes = tape.nodes
    for i in range(start, stop):
        for p in nodes[i].parents:
            if p.idx in active:
                active.add(i)
                break
    return active
