"""Vector fields with symbolic components, Lie brackets, and flows.

Flows use Taylor stepping: at each step the solution's t-series is built
to a fixed order by the standard recurrence x_{k+1} = F(x)_k / (k+1),
the variational (differential) series rides along via
J_{k+1} = (sum_j A_j J_{k-j}) / (k+1) with A the Jacobian series, and
the step size comes from the tail coefficients against a per-step error
budget.  No adaptive ODE library is involved: the same series evaluated
at several offsets stays a polynomial in t, which keeps finite
differences of transported frames quiet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FlowStepError, InputError
from .expr import (
    Chart,
    ChartPoint,
    Expr,
    ScalarExpr,
    _check_same_chart,
    add,
    const,
    diff,
    evaluate,
    mul,
    parse,
    sub,
    to_source,
)
from .jets import compile_tape, run_float, run_series, run_series_batch


def _as_expr(c, chart):
    if isinstance(c, ScalarExpr):
        _check_same_chart(c.chart, chart)
        return c.expr
    if isinstance(c, Expr):
        return c
    if isinstance(c, str):
        return parse(c, chart).expr
    if isinstance(c, (int, float)):
        return const(c)
    from fractions import Fraction

    if isinstance(c, Fraction):
        return const(c)
    raise InputError(f"cannot use {type(c).__name__} as a field component")


class VecField:
    """A vector field on a chart, components symbolic."""

    __slots__ = ("chart", "comps", "_comp_tape", "_jac_tape")

    def __init__(self, chart: Chart, comps):
        comps = tuple(_as_expr(c, chart) for c in comps)
        if len(comps) != chart.dim:
            raise InputError(
                f"{len(comps)} components for a {chart.dim}-dimensional chart"
            )
        self.chart = chart
        self.comps = comps
        self._comp_tape = None
        self._jac_tape = None

    @classmethod
    def basis(cls, chart, i):
        """The coordinate field d/dx_i."""
        return cls(chart, tuple(1 if j == i else 0 for j in range(chart.dim)))

    @classmethod
    def zero(cls, chart):
        return cls(chart, (0,) * chart.dim)

    @property
    def components(self):
        return tuple(ScalarExpr(c, self.chart) for c in self.comps)

    def _tapes(self):
        if self._comp_tape is None:
            self._comp_tape = compile_tape(self.comps, self.chart.names)
            jac = [
                diff(c, v) for c in self.comps for v in self.chart.names
            ]
            self._jac_tape = compile_tape(jac, self.chart.names)
        return self._comp_tape, self._jac_tape

    def at(self, point):
        """Component values at a point (floats; arrays broadcast)."""
        env = point.env() if isinstance(point, ChartPoint) else dict(point)
        env = {k: float(v) if not isinstance(v, np.ndarray) else v
               for k, v in env.items()}
        tape, _ = self._tapes()
        return np.array(run_float(tape, env), dtype=float)

    def at_many(self, points):
        """Values at many points: points is (n_points, dim); returns
        (n_points, dim)."""
        pts = np.asarray(points, dtype=float)
        env = {nm: pts[:, i] for i, nm in enumerate(self.chart.names)}
        tape, _ = self._tapes()
        vals = run_float(tape, env)
        cols = [np.broadcast_to(np.asarray(v, dtype=float), (pts.shape[0],))
                for v in vals]
        return np.column_stack(cols)

    def exact_at(self, point):
        """Exact evaluation (Fractions preserved where possible)."""
        env = point.env() if isinstance(point, ChartPoint) else dict(point)
        return tuple(evaluate(c, env) for c in self.comps)

    def jacobian_at(self, point):
        env = point.env() if isinstance(point, ChartPoint) else dict(point)
        env = {k: float(v) for k, v in env.items()}
        _, jac = self._tapes()
        n = self.chart.dim
        vals = run_float(jac, env)
        return np.array(vals, dtype=float).reshape(n, n)

    def apply_to(self, f):
        """Directional derivative X(f) of a scalar expression."""
        fe = _as_expr(f, self.chart)
        acc = None
        for c, v in zip(self.comps, self.chart.names):
            term = mul(c, diff(fe, v))
            acc = term if acc is None else add(acc, term)
        return ScalarExpr(acc, self.chart)

    def __add__(self, other):
        _check_same_chart(self.chart, other.chart)
        return VecField(
            self.chart,
            tuple(add(a, b) for a, b in zip(self.comps, other.comps)),
        )

    def __sub__(self, other):
        _check_same_chart(self.chart, other.chart)
        return VecField(
            self.chart,
            tuple(sub(a, b) for a, b in zip(self.comps, other.comps)),
        )

    def __neg__(self):
        return VecField(self.chart, tuple(sub(const(0), c) for c in self.comps))

    def scale(self, c):
        ce = _as_expr(c, self.chart)
        return VecField(self.chart, tuple(mul(ce, comp) for comp in self.comps))

    def __rmul__(self, c):
        return self.scale(c)

    def __repr__(self):
        inner = ", ".join(to_source(c) for c in self.comps)
        return f"VecField[{inner}]"


def lie_bracket(X: VecField, Y: VecField) -> VecField:
    """[X, Y]^i = X(Y^i) - Y(X^i), exact at the expression level."""
    _check_same_chart(X.chart, Y.chart)
    names = X.chart.names
    comps = []
    for i in range(X.chart.dim):
        acc = None
        for j, v in enumerate(names):
            term = sub(
                mul(X.comps[j], diff(Y.comps[i], v)),
                mul(Y.comps[j], diff(X.comps[i], v)),
            )
            acc = term if acc is None else add(acc, term)
        comps.append(acc)
    return VecField(X.chart, tuple(comps))


def ad_power(X: VecField, Y: VecField, k: int) -> VecField:
    """Iterated bracket: ad_X^k Y = [X, [X, ... [X, Y]]]."""
    if k < 0:
        raise InputError("ad power must be >= 0")
    out = Y
    for _ in range(k):
        out = lie_bracket(X, out)
    return out


def combine(terms, chart=None) -> VecField:
    """Linear combination sum(c_a * F_a) with scalar-expression
    coefficients."""
    terms = list(terms)
    if not terms:
        raise InputError("empty combination")
    if chart is None:
        chart = terms[0][1].chart
    acc = VecField.zero(chart)
    for c, F in terms:
        acc = acc + F.scale(_as_expr(c, chart))
    return acc


# ---------------------------------------------------------------------------
# flows


@dataclass(frozen=True)
class FlowResult:
    """Endpoint of a flow, its differential with respect to the starting
    point, and a crude accumulated local-error estimate."""

    point: ChartPoint
    differential: np.ndarray
    error_estimate: float
    steps: int


_MAX_STEPS = 50_000


def _series_at(X: VecField, x0, K):
    """Taylor series of the integral curve and its variational solution
    at a starting point: returns (xs, Js) with xs[k] the t^k coefficient
    vector and Js[k] the t^k coefficient matrix."""
    tape, jac_tape = X._tapes()
    n = X.chart.dim
    names = X.chart.names
    xs = np.zeros((K + 1, n))
    xs[0] = x0
    env = {nm: xs[:, i].copy() for i, nm in enumerate(names)}
    for k in range(K):
        env = {nm: xs[:, i] for i, nm in enumerate(names)}
        f = run_series(tape, env, K)
        for i in range(n):
            fi = np.asarray(f[i])
            fk = fi[k] if fi.ndim else (fi if k == 0 else 0.0)
            xs[k + 1, i] = fk / (k + 1)
    env = {nm: xs[:, i] for i, nm in enumerate(names)}
    jvals = run_series(jac_tape, env, K)
    A = np.zeros((K + 1, n, n))
    for i in range(n):
        for j in range(n):
            v = np.asarray(jvals[i * n + j])
            if v.ndim:
                A[:, i, j] = v[: K + 1]
            else:
                A[0, i, j] = v
    Js = np.zeros((K + 1, n, n))
    Js[0] = np.eye(n)
    for k in range(K):
        acc = np.zeros((n, n))
        for j in range(k + 1):
            acc += A[j] @ Js[k - j]
        Js[k + 1] = acc / (k + 1)
    return xs, Js


def _horner_vec(cs, h):
    out = np.zeros_like(cs[0])
    for c in cs[::-1]:
        out = out * h + c
    return out


def flow_series(X: VecField, point: ChartPoint, order: int):
    """One local Taylor series of the flow at t = 0: coefficient arrays
    for the curve (order+1, n) and its differential (order+1, n, n)."""
    _check_same_chart(X.chart, point.chart)
    x0 = np.array([float(c) for c in point.coords])
    return _series_at(X, x0, order)


def flow_series_batch(X: VecField, x0s, order: int):
    """flow_series over a batch of starting points.

    x0s: (batch, n).  Returns xs (batch, order+1, n) and Js
    (batch, order+1, n, n).  One vectorized pass replaces per-point
    Python overhead; the coefficients are identical to flow_series.
    """
    tape, jac_tape = X._tapes()
    n = X.chart.dim
    names = X.chart.names
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    B = x0s.shape[0]
    K = order
    xs = np.zeros((B, K + 1, n))
    xs[:, 0, :] = x0s
    for k in range(K):
        env = {nm: xs[:, :, i] for i, nm in enumerate(names)}
        f = run_series_batch(tape, env, K, B)
        for i in range(n):
            xs[:, k + 1, i] = f[i][:, k] / (k + 1)
    env = {nm: xs[:, :, i] for i, nm in enumerate(names)}
    jvals = run_series_batch(jac_tape, env, K, B)
    A = np.zeros((B, K + 1, n, n))
    for i in range(n):
        for j in range(n):
            A[:, :, i, j] = jvals[i * n + j]
    Js = np.zeros((B, K + 1, n, n))
    Js[:, 0] = np.eye(n)
    for k in range(K):
        acc = np.zeros((B, n, n))
        for j in range(k + 1):
            acc += A[:, j] @ Js[:, k - j]
        Js[:, k + 1] = acc / (k + 1)
    return xs, Js


def flow(X: VecField, point: ChartPoint, t: float, order: int = 8,
         tol: float = 1e-12) -> FlowResult:
    """Flow a point for time t along X, carrying the differential."""
    if order < 4:
        raise InputError("flow order must be at least 4")
    _check_same_chart(X.chart, point.chart)
    x = np.array([float(c) for c in point.coords])
    n = X.chart.dim
    J_tot = np.eye(n)
    err = 0.0
    remaining = float(t)
    steps = 0
    sgn = 1.0 if remaining >= 0 else -1.0
    while remaining != 0.0:
        if steps >= _MAX_STEPS:
            raise FlowStepError(f"flow did not finish in {_MAX_STEPS} steps")
        xs, Js = _series_at(X, x, order)
        tail = max(
            np.max(np.abs(xs[order])),
            np.max(np.abs(xs[order - 1])),
            np.max(np.abs(Js[order])),
        )
        if tail == 0.0:
            h = abs(remaining)
        else:
            h = min(abs(remaining), 0.9 * (tol / tail) ** (1.0 / order))
        if h < abs(remaining) and h < 1e-13 * (1.0 + abs(t)):
            # a finishing step may be arbitrarily small (|t| itself can be
            # tiny); only a step that stalls short of the target is an error
            raise FlowStepError(
                f"step size underflow ({h:.2e}) at flow time {t - remaining!r}"
            )
        hs = sgn * h
        x = _horner_vec(xs, hs)
        J_tot = _horner_vec(Js, hs) @ J_tot
        err += max(np.max(np.abs(xs[order])), np.max(np.abs(Js[order]))) * h ** order
        remaining -= hs
        if abs(remaining) < 1e-16 * abs(t):
            remaining = 0.0
        steps += 1
    return FlowResult(
        point=ChartPoint(X.chart, tuple(x)),
        differential=J_tot,
        error_estimate=err,
        steps=steps,
    )
