"""Truncated Taylor arithmetic.

Two carriers share one compiled form of an expression DAG:

* Jet - dense multivariate Taylor coefficients at a point, multi-indices
  in graded-lexicographic order.  Small (N, K) only; used to test
  semantic equality of expressions and the diff/eval commutation.
* univariate coefficient arrays (numpy, length K+1) - the workhorse for
  flows and for t-series of transported subspaces, where N would be 2n
  and a dense multivariate table would be hopeless.

A Tape is an expression DAG flattened to register operations once, then
executed with float, exact-rational, series or jet semantics.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import combinations_with_replacement

import numpy as np

from .errors import EvaluationDomainError, InputError
from .expr import Expr, ScalarExpr, ChartPoint, to_source, _postorder

# ---------------------------------------------------------------------------
# tape


class Tape:
    """Straight-line program for a batch of expressions over shared
    variables.  Registers: [constants..., variables..., temporaries...]."""

    __slots__ = ("n_slots", "const_loads", "var_slots", "ops", "out_slots", "var_names")

    def __init__(self, n_slots, const_loads, var_slots, ops, out_slots, var_names):
        self.n_slots = n_slots
        self.const_loads = const_loads  # [(slot, value)]
        self.var_slots = var_slots      # {name: slot}
        self.ops = ops                  # [(kind, out, a, b, node)]
        self.out_slots = out_slots
        self.var_names = var_names


def compile_tape(exprs, var_names) -> Tape:
    roots = []
    for e in exprs:
        roots.append(e.expr if isinstance(e, ScalarExpr) else e)
    var_names = tuple(var_names)
    slot = {}
    const_loads = []
    var_slots = {}
    for name in var_names:
        var_slots[name] = len(slot) + len(const_loads)
        slot[("v", name)] = var_slots[name]
    n = len(var_names)
    ops = []
    next_slot = n
    for node in _postorder(roots):
        k = node.kind
        if k == "var":
            if ("v", node.name) not in slot:
                raise InputError(f"variable {node.name!r} not among tape inputs")
            slot[node] = slot[("v", node.name)]
            continue
        if node in slot:
            continue
        if k == "const":
            const_loads.append((next_slot, node.value))
        elif k == "pow":
            ops.append(("pow", next_slot, slot[node.args[0]], node.exponent, node))
        elif k == "func":
            ops.append((node.name, next_slot, slot[node.args[0]], None, node))
        else:
            ops.append((k, next_slot, slot[node.args[0]], slot[node.args[1]], node))
        slot[node] = next_slot
        next_slot += 1
    outs = []
    for r in roots:
        if r.kind == "var":
            outs.append(slot[("v", r.name)])
        else:
            outs.append(slot[r])
    return Tape(next_slot, const_loads, var_slots, ops, outs, var_names)


def run_float(tape: Tape, env):
    """Evaluate with floats; values may be numpy arrays (broadcasting
    gives batched evaluation over many points at once)."""
    r = [None] * tape.n_slots
    for s, v in tape.const_loads:
        r[s] = float(v)
    for name, s in tape.var_slots.items():
        r[s] = env[name]
    for kind, out, a, b, node in tape.ops:
        if kind == "add":
            r[out] = r[a] + r[b]
        elif kind == "sub":
            r[out] = r[a] - r[b]
        elif kind == "mul":
            r[out] = r[a] * r[b]
        elif kind == "div":
            r[out] = r[a] / r[b]
        elif kind == "pow":
            r[out] = r[a] ** b
        elif kind == "exp":
            r[out] = np.exp(r[a])
        elif kind == "ln":
            r[out] = np.log(r[a])
        elif kind == "sin":
            r[out] = np.sin(r[a])
        else:
            r[out] = np.cos(r[a])
    return [r[s] for s in tape.out_slots]


def run_exact(tape: Tape, env):
    """Evaluate with Fractions.  Only defined for function-free tapes."""
    r = [None] * tape.n_slots
    for s, v in tape.const_loads:
        if not isinstance(v, Fraction):
            raise InputError("float constant in exact evaluation")
        r[s] = v
    for name, s in tape.var_slots.items():
        r[s] = Fraction(env[name])
    for kind, out, a, b, node in tape.ops:
        if kind == "add":
            r[out] = r[a] + r[b]
        elif kind == "sub":
            r[out] = r[a] - r[b]
        elif kind == "mul":
            r[out] = r[a] * r[b]
        elif kind == "div":
            if r[b] == 0:
                raise EvaluationDomainError("division by zero", to_source(node))
            r[out] = r[a] / r[b]
        elif kind == "pow":
            r[out] = r[a] ** b
        else:
            raise InputError(f"{kind} has no exact evaluation")
    return [r[s] for s in tape.out_slots]


# ---------------------------------------------------------------------------
# univariate series helpers (coefficient arrays c[0..K], c[k] multiplies t^k)


def s_const(v, K):
    c = np.zeros(K + 1)
    c[0] = v
    return c


def s_mul(a, b, K):
    return np.convolve(a, b)[: K + 1]


def s_div(a, b, K, node=None):
    if b[0] == 0.0:
        raise EvaluationDomainError(
            "division by a series vanishing at its base point",
            to_source(node) if node is not None else "<series>",
        )
    q = np.empty(K + 1)
    q[0] = a[0] / b[0]
    for k in range(1, K + 1):
        q[k] = (a[k] - np.dot(b[1 : k + 1], q[k - 1 :: -1])) / b[0]
    return q


def s_powi(a, k, K, node=None):
    if k < 0:
        inv = s_div(s_const(1.0, K), a, K, node)
        return s_powi(inv, -k, K, node)
    # binary exponentiation; k >= 2 in folded trees but handle the rest
    result = s_const(1.0, K)
    base = a
    while k:
        if k & 1:
            result = s_mul(result, base, K)
        k >>= 1
        if k:
            base = s_mul(base, base, K)
    return result


def s_exp(u, K):
    e = np.empty(K + 1)
    e[0] = math.exp(u[0])
    ju = np.arange(1, K + 1) * u[1 : K + 1]
    for k in range(1, K + 1):
        e[k] = np.dot(ju[:k], e[k - 1 :: -1][:k]) / k
    return e


def s_ln(u, K, node=None):
    if u[0] <= 0.0:
        raise EvaluationDomainError(
            "ln of a nonpositive value",
            to_source(node) if node is not None else "<series>",
        )
    l = np.empty(K + 1)
    l[0] = math.log(u[0])
    for k in range(1, K + 1):
        acc = k * u[k]
        for j in range(1, k):
            acc -= (k - j) * u[j] * l[k - j]
        l[k] = acc / (k * u[0])
    return l


def s_sin_cos(u, K):
    s = np.empty(K + 1)
    c = np.empty(K + 1)
    s[0] = math.sin(u[0])
    c[0] = math.cos(u[0])
    ju = np.arange(1, K + 1) * u[1 : K + 1]
    for k in range(1, K + 1):
        s[k] = np.dot(ju[:k], c[k - 1 :: -1][:k]) / k
        c[k] = -np.dot(ju[:k], s[k - 1 :: -1][:k]) / k
    return s, c


def run_series(tape: Tape, env, K):
    """Evaluate with truncated t-series.  env maps variable names to
    length-(K+1) coefficient arrays."""
    r = [None] * tape.n_slots
    for s, v in tape.const_loads:
        r[s] = s_const(float(v), K)
    for name, s in tape.var_slots.items():
        r[s] = env[name]
    for kind, out, a, b, node in tape.ops:
        if kind == "add":
            r[out] = r[a] + r[b]
        elif kind == "sub":
            r[out] = r[a] - r[b]
        elif kind == "mul":
            r[out] = s_mul(r[a], r[b], K)
        elif kind == "div":
            r[out] = s_div(r[a], r[b], K, node)
        elif kind == "pow":
            r[out] = s_powi(r[a], b, K, node)
        elif kind == "exp":
            r[out] = s_exp(r[a], K)
        elif kind == "ln":
            r[out] = s_ln(r[a], K, node)
        elif kind == "sin":
            r[out] = s_sin_cos(r[a], K)[0]
        else:
            r[out] = s_sin_cos(r[a], K)[1]
    return [r[s] for s in tape.out_slots]


_SERIES_FN = {
    "exp": lambda u, K: s_exp(u, K),
    "ln": lambda u, K: s_ln(u, K),
    "sin": lambda u, K: s_sin_cos(u, K)[0],
    "cos": lambda u, K: s_sin_cos(u, K)[1],
}


# ---------------------------------------------------------------------------
# batched series: arrays of shape (B, K+1), one row per instance.  The
# extension tower runs over dozens of covectors at once; batching turns
# per-coefficient Python overhead into vectorized work.


def sb_mul(a, b, K):
    out = np.empty_like(a)
    for k in range(K + 1):
        out[:, k] = np.sum(a[:, : k + 1] * b[:, : k + 1][:, ::-1], axis=1)
    return out


def sb_div(a, b, K, node=None):
    if np.any(b[:, 0] == 0.0):
        raise EvaluationDomainError(
            "division by a series vanishing at its base point",
            to_source(node) if node is not None else "<series>",
        )
    q = np.empty_like(a)
    q[:, 0] = a[:, 0] / b[:, 0]
    for k in range(1, K + 1):
        acc = np.sum(b[:, 1 : k + 1] * q[:, :k][:, ::-1], axis=1)
        q[:, k] = (a[:, k] - acc) / b[:, 0]
    return q


def sb_powi(a, k, K, node=None):
    if k < 0:
        one = np.zeros_like(a)
        one[:, 0] = 1.0
        return sb_powi(sb_div(one, a, K, node), -k, K, node)
    out = np.zeros_like(a)
    out[:, 0] = 1.0
    base = a
    while k:
        if k & 1:
            out = sb_mul(out, base, K)
        k >>= 1
        if k:
            base = sb_mul(base, base, K)
    return out


def sb_exp(u, K):
    e = np.empty_like(u)
    e[:, 0] = np.exp(u[:, 0])
    j = np.arange(1, K + 1)
    ju = j * u[:, 1 : K + 1]
    for k in range(1, K + 1):
        e[:, k] = np.sum(ju[:, :k] * e[:, :k][:, ::-1], axis=1) / k
    return e


def sb_ln(u, K, node=None):
    if np.any(u[:, 0] <= 0.0):
        raise EvaluationDomainError(
            "ln of a nonpositive value",
            to_source(node) if node is not None else "<series>",
        )
    l = np.empty_like(u)
    l[:, 0] = np.log(u[:, 0])
    for k in range(1, K + 1):
        acc = k * u[:, k]
        if k > 1:
            w = np.arange(k - 1, 0, -1)
            acc = acc - np.sum(u[:, 1:k] * (w * l[:, 1:k][:, ::-1]), axis=1)
        l[:, k] = acc / (k * u[:, 0])
    return l


def sb_sin_cos(u, K):
    s = np.empty_like(u)
    c = np.empty_like(u)
    s[:, 0] = np.sin(u[:, 0])
    c[:, 0] = np.cos(u[:, 0])
    j = np.arange(1, K + 1)
    ju = j * u[:, 1 : K + 1]
    for k in range(1, K + 1):
        s[:, k] = np.sum(ju[:, :k] * c[:, :k][:, ::-1], axis=1) / k
        c[:, k] = -np.sum(ju[:, :k] * s[:, :k][:, ::-1], axis=1) / k
    return s, c


def run_series_batch(tape: Tape, env, K, batch):
    """run_series over a batch: env maps names to (batch, K+1) arrays."""
    r = [None] * tape.n_slots
    for s, v in tape.const_loads:
        arr = np.zeros((batch, K + 1))
        arr[:, 0] = float(v)
        r[s] = arr
    for name, s in tape.var_slots.items():
        r[s] = env[name]
    for kind, out, a, b, node in tape.ops:
        if kind == "add":
            r[out] = r[a] + r[b]
        elif kind == "sub":
            r[out] = r[a] - r[b]
        elif kind == "mul":
            r[out] = sb_mul(r[a], r[b], K)
        elif kind == "div":
            r[out] = sb_div(r[a], r[b], K, node)
        elif kind == "pow":
            r[out] = sb_powi(r[a], b, K, node)
        elif kind == "exp":
            r[out] = sb_exp(r[a], K)
        elif kind == "ln":
            r[out] = sb_ln(r[a], K, node)
        elif kind == "sin":
            r[out] = sb_sin_cos(r[a], K)[0]
        else:
            r[out] = sb_sin_cos(r[a], K)[1]
    return [r[s] for s in tape.out_slots]


# ---------------------------------------------------------------------------
# multivariate jets


class JetContext:
    """Index tables for dense jets with N variables truncated at total
    degree K.  Multi-indices in graded-lexicographic order."""

    _cache: dict = {}

    def __new__(cls, nvars, order):
        key = (nvars, order)
        hit = cls._cache.get(key)
        if hit is not None:
            return hit
        self = super().__new__(cls)
        self.nvars = nvars
        self.order = order
        exps = []
        for d in range(order + 1):
            block = sorted(
                (tuple(_counts(c, nvars)) for c in
                 combinations_with_replacement(range(nvars), d)),
                reverse=True,
            )
            exps.extend(block)
        self.exponents = tuple(exps)
        self.index = {e: i for i, e in enumerate(exps)}
        self.size = len(exps)
        deg = [sum(e) for e in exps]
        ia, ib, io = [], [], []
        for i, ei in enumerate(exps):
            for j, ej in enumerate(exps):
                if deg[i] + deg[j] <= order:
                    ia.append(i)
                    ib.append(j)
                    io.append(self.index[tuple(a + b for a, b in zip(ei, ej))])
        self._ia = np.array(ia)
        self._ib = np.array(ib)
        self._io = np.array(io)
        cls._cache[key] = self
        return self

    def mul(self, a, b):
        out = np.zeros(self.size)
        np.add.at(out, self._io, a[self._ia] * b[self._ib])
        return out


def _counts(combo, nvars):
    e = [0] * nvars
    for i in combo:
        e[i] += 1
    return e


class Jet:
    """Taylor coefficients of a scalar at a point: coefficient of
    multi-index alpha is (d^alpha f / alpha!) evaluated there."""

    __slots__ = ("ctx", "coeffs")

    def __init__(self, ctx, coeffs):
        self.ctx = ctx
        self.coeffs = np.asarray(coeffs, dtype=float)

    @classmethod
    def constant(cls, v, ctx):
        c = np.zeros(ctx.size)
        c[0] = float(v)
        return cls(ctx, c)

    @classmethod
    def variable(cls, i, value, ctx):
        c = np.zeros(ctx.size)
        c[0] = float(value)
        if ctx.order >= 1:
            e = tuple(1 if j == i else 0 for j in range(ctx.nvars))
            c[ctx.index[e]] = 1.0
        return cls(ctx, c)

    @property
    def value(self):
        return float(self.coeffs[0])

    def coefficient(self, alpha):
        return float(self.coeffs[self.ctx.index[tuple(alpha)]])

    def partial(self, alpha):
        """The actual partial derivative: coefficient times alpha!."""
        f = 1
        for a in alpha:
            f *= math.factorial(a)
        return self.coefficient(alpha) * f

    def _bin(self, other, op):
        if not isinstance(other, Jet):
            other = Jet.constant(other, self.ctx)
        if other.ctx is not self.ctx:
            raise InputError("jets from different contexts")
        return op(self, other)

    def __add__(self, other):
        return self._bin(other, lambda a, b: Jet(a.ctx, a.coeffs + b.coeffs))

    __radd__ = __add__

    def __sub__(self, other):
        return self._bin(other, lambda a, b: Jet(a.ctx, a.coeffs - b.coeffs))

    def __rsub__(self, other):
        return Jet.constant(other, self.ctx) - self

    def __mul__(self, other):
        return self._bin(other, lambda a, b: Jet(a.ctx, a.ctx.mul(a.coeffs, b.coeffs)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            other = Jet.constant(other, self.ctx)
        return self * other._reciprocal()

    def __rtruediv__(self, other):
        return Jet.constant(other, self.ctx) / self

    def _compose_series(self, series_coeffs):
        """Horner in (self - value): series_coeffs[j] = f^(j)(value)/j!."""
        ctx = self.ctx
        hat = self.coeffs.copy()
        hat[0] = 0.0
        out = Jet.constant(series_coeffs[ctx.order], ctx)
        for j in range(ctx.order - 1, -1, -1):
            out = Jet(ctx, ctx.mul(out.coeffs, hat))
            out.coeffs[0] += series_coeffs[j]
        return out

    def _reciprocal(self):
        if self.coeffs[0] == 0.0:
            raise EvaluationDomainError("division by zero", "<jet>")
        K = self.ctx.order
        base = np.zeros(K + 1)
        base[0] = self.coeffs[0]
        if K >= 1:
            base[1] = 1.0
        rec = s_div(s_const(1.0, K), base, K)
        return self._compose_series(rec)

    def powi(self, k):
        if k < 0:
            return self._reciprocal().powi(-k)
        out = Jet.constant(1.0, self.ctx)
        base = self
        while k:
            if k & 1:
                out = out * base
            k >>= 1
            if k:
                base = base * base
        return out

    def __pow__(self, k):
        return self.powi(k)

    def apply(self, fname):
        K = self.ctx.order
        base = np.zeros(K + 1)
        base[0] = self.coeffs[0]
        if K >= 1:
            base[1] = 1.0
        return self._compose_series(_SERIES_FN[fname](base, K))

    def derivative(self, i):
        """Formal partial derivative in direction i: a jet of order K-1."""
        ctx = self.ctx
        if ctx.order == 0:
            raise InputError("cannot differentiate an order-0 jet")
        dctx = JetContext(ctx.nvars, ctx.order - 1)
        out = np.zeros(dctx.size)
        for pos, e in enumerate(dctx.exponents):
            src = list(e)
            src[i] += 1
            out[pos] = (e[i] + 1) * self.coeffs[ctx.index[tuple(src)]]
        return Jet(dctx, out)

    def allclose(self, other, tol=1e-12):
        return (
            self.ctx is other.ctx
            and bool(np.allclose(self.coeffs, other.coeffs, rtol=tol, atol=tol))
        )

    def __repr__(self):
        return f"Jet(N={self.ctx.nvars}, K={self.ctx.order}, f={self.value})"


def run_jets(tape: Tape, env, ctx):
    r = [None] * tape.n_slots
    for s, v in tape.const_loads:
        r[s] = Jet.constant(v, ctx)
    for name, s in tape.var_slots.items():
        r[s] = env[name]
    for kind, out, a, b, node in tape.ops:
        try:
            if kind == "add":
                r[out] = r[a] + r[b]
            elif kind == "sub":
                r[out] = r[a] - r[b]
            elif kind == "mul":
                r[out] = r[a] * r[b]
            elif kind == "div":
                r[out] = r[a] / r[b]
            elif kind == "pow":
                r[out] = r[a].powi(b)
            else:
                if kind == "ln" and r[a].value <= 0.0:
                    raise EvaluationDomainError(
                        "ln of a nonpositive value", to_source(node)
                    )
                r[out] = r[a].apply(kind)
        except EvaluationDomainError as err:
            raise EvaluationDomainError(err.message, to_source(node)) from None
    return [r[s] for s in tape.out_slots]


def eval_jet(e, at: ChartPoint, order: int) -> Jet:
    """Taylor coefficients of a scalar expression at a chart point, up to
    total degree `order`."""
    if order < 0:
        raise InputError("jet order must be >= 0")
    if isinstance(e, ScalarExpr):
        chart = e.chart
        if at.chart != chart:
            raise InputError("point chart does not match expression chart")
        expr = e.expr
    else:
        raise InputError("eval_jet expects a ScalarExpr")
    ctx = JetContext(chart.dim, order)
    env = {
        name: Jet.variable(i, float(at.coords[i]), ctx)
        for i, name in enumerate(chart.names)
    }
    tape = compile_tape([expr], chart.names)
    return run_jets(tape, env, ctx)[0]
