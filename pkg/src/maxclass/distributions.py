"""Rank-2 distributions, their derived flags, and growth vectors.

A distribution is presented by a frame (X1, X2) on a coordinate chart.
The constructor of interest is from_ode: the underdetermined ODE

    z^(r)(x) = F(x, y, ..., y^(s), z, ..., z^(r-1)),   r + s = n - 2

becomes a rank-2 distribution on the jet chart
(x, p_0..p_s, q_0..q_{r-1}) framed by the total-derivative field and
d/dp_s.  The maximally symmetric model z' = (y^(n-3))^2 is the special
case r = 1, F = p_{n-3}^2.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .errors import InputError, StratumError
from .expr import (
    ONE,
    ZERO,
    Chart,
    ChartPoint,
    ScalarExpr,
    add,
    evaluate,
    mul,
    neg,
    parse,
    var,
)
from .fields import VecField, lie_bracket
from .linalg import rank_decide


class OdeModel:
    """The data of z^(r) = F(x, y..y^(s), z..z^(r-1)) on its jet chart."""

    __slots__ = ("r", "s", "F", "chart")

    def __init__(self, r, s, F, chart):
        self.r = r
        self.s = s
        self.F = F
        self.chart = chart

    def __repr__(self):
        return f"OdeModel(r={self.r}, s={self.s}, F={self.F})"


class Distribution2:
    """A rank-2 distribution spanned by two fields on one chart.

    Rank 2 is checked lazily at the points where computations happen,
    not over the whole chart.
    """

    __slots__ = ("chart", "X1", "X2", "ode", "_cache")

    def __init__(self, chart: Chart, X1: VecField, X2: VecField, ode=None):
        if chart.dim < 3:
            raise InputError("a rank-2 distribution needs an ambient of dim >= 3")
        if X1.chart != chart or X2.chart != chart:
            raise InputError("frame fields live on a different chart")
        self.chart = chart
        self.X1 = X1
        self.X2 = X2
        self.ode = ode
        self._cache = {}

    @property
    def dim(self):
        return self.chart.dim

    def frame_at(self, q: ChartPoint):
        """Values of (X1, X2) at a point, with the rank-2 check."""
        M = np.column_stack([self.X1.at(q), self.X2.at(q)])
        r, _ = rank_decide(M, context="distribution frame")
        if r != 2:
            raise InputError(f"frame is rank {r}, not 2, at {q}")
        return M

    def __repr__(self):
        return f"Distribution2(dim {self.dim})"


def _pairing_is_zero(coeffs, Y: VecField, chart) -> bool:
    """Whether the one-form sum(c_i dx_i) annihilates Y.

    Structural zero after constant folding is the expected outcome for
    jet frames; exact rational evaluation at deterministic probe points
    is the fallback when the folder leaves residue.
    """
    acc = ZERO
    for c, comp in zip(coeffs, Y.comps):
        acc = add(acc, mul(c, comp))
    if acc is ZERO:
        return True
    rng = np.random.default_rng(1234)
    for _ in range(7):
        env = {
            nm: Fraction(int(rng.integers(-99, 100)), int(rng.integers(1, 13)))
            for nm in chart.names
        }
        try:
            v = evaluate(acc, env)
        except Exception:
            return False
        if v != 0:
            return False
    return True


def from_ode(r: int, s: int, F) -> Distribution2:
    """Distribution of the ODE z^(r) = F on (x, p_0..p_s, q_0..q_{r-1}).

    X1 is the total derivative, X2 = d/dp_s.  The n-2 contact one-forms
    dp_i - p_{i+1} dx (i < s), dq_j - q_{j+1} dx (j < r-1) and
    dq_{r-1} - F dx are verified to annihilate both fields at build time.
    """
    if not (isinstance(r, int) and r >= 1):
        raise InputError("r must be an integer >= 1")
    if not (isinstance(s, int) and s >= 0):
        raise InputError("s must be an integer >= 0")
    names = ["x"] + [f"p{i}" for i in range(s + 1)] + [f"q{j}" for j in range(r)]
    chart = Chart(names)
    n = chart.dim
    if isinstance(F, str):
        F = parse(F, chart)
    elif isinstance(F, ScalarExpr):
        if F.chart != chart:
            raise InputError(
                f"F must live on the jet chart {chart.names}, got {F.chart.names}"
            )
    else:
        raise InputError("F must be an expression or source text")

    comps = [None] * n
    comps[0] = 1
    for i in range(s):
        comps[chart.index[f"p{i}"]] = var(f"p{i+1}")
    comps[chart.index[f"p{s}"]] = 0
    for j in range(r - 1):
        comps[chart.index[f"q{j}"]] = var(f"q{j+1}")
    comps[chart.index[f"q{r-1}"]] = F.expr
    X1 = VecField(chart, comps)
    X2 = VecField.basis(chart, chart.index[f"p{s}"])

    # each contact form is d(prim) - c dx, stored as (prim name, c)
    contact = [(f"p{i}", var(f"p{i+1}")) for i in range(s)]
    contact += [(f"q{j}", var(f"q{j+1}")) for j in range(r - 1)]
    contact.append((f"q{r-1}", F.expr))
    for prim, c in contact:
        coeffs = [ZERO] * n
        coeffs[chart.index[prim]] = ONE
        coeffs[0] = neg(c)
        for Y in (X1, X2):
            if not _pairing_is_zero(coeffs, Y, chart):
                raise InputError(
                    f"contact form d{prim} - (...)dx does not annihilate the frame"
                )

    return Distribution2(chart, X1, X2, ode=OdeModel(r, s, F, chart))


def model_distribution(n: int) -> Distribution2:
    """The maximally symmetric model z'(x) = (y^(n-3))^2 in dimension n."""
    if n < 4:
        raise InputError("the model needs n >= 4")
    m = n - 3
    return from_ode(1, m, f"p{m}^2")


def power_basis(D: Distribution2, level: int):
    """Fields spanning D^level: the frame plus iterated brackets, with
    redundancy (spans are decided numerically downstream)."""
    if level < 1:
        raise InputError("level must be >= 1")
    layers = [[D.X1, D.X2]]
    for _ in range(level - 1):
        nxt = []
        for B in layers[-1]:
            nxt.append(lie_bracket(D.X1, B))
            nxt.append(lie_bracket(D.X2, B))
        layers.append(nxt)
    out = []
    for layer in layers:
        out.extend(layer)
    return out


def growth_vector(D: Distribution2, q: ChartPoint, depth=None) -> tuple:
    """Growth vector (dim D^1(q), dim D^2(q), ...) at a point.

    Stops at the ambient dimension or when two consecutive entries agree
    (the repeated entry is kept once to show the stall).
    """
    if q.chart != D.chart:
        raise InputError("point lies on a different chart")
    n = D.dim
    if depth is None:
        depth = n
    if depth < 1:
        raise InputError("depth must be >= 1")

    dims = []
    new_layer = [D.X1, D.X2]
    vals = [f.at(q) for f in new_layer]
    for level in range(1, depth + 1):
        M = np.column_stack(vals)
        rk, _ = rank_decide(M, context=f"growth level {level}")
        dims.append(rk)
        if level == 1 and rk != 2:
            raise InputError(f"frame is rank {rk}, not 2, at {q}")
        if rk == n:
            break
        if level >= 2 and dims[-1] == dims[-2]:
            break
        if level == depth:
            break
        nxt = []
        for B in new_layer:
            nxt.append(lie_bracket(D.X1, B))
            nxt.append(lie_bracket(D.X2, B))
        new_layer = nxt
        vals.extend(f.at(q) for f in nxt)
    return tuple(dims)
