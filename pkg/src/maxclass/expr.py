"""Symbolic scalar expressions over named coordinate charts.

Expression trees are hash-consed: structurally identical subtrees are the
same Python object, so equality is `is`, common subexpressions are shared
across an entire bracket computation, and the single structural rewrite
rule (e - e -> 0) needs only an identity check.

Simplification is deliberately minimal: constant folding and the 0/1
identities.  Exact rational constants stay exact through differentiation
and arithmetic; floats appear only where the user wrote them or where a
transcendental function forced one.  Semantic equality of expressions is
checked with jets (see jets.py), not with rewriting.
"""

from __future__ import annotations

import math
import re
from decimal import Decimal
from fractions import Fraction
from typing import Union

from .errors import (
    ChartMismatchError,
    EvaluationDomainError,
    ExprSyntaxError,
    InputError,
    UndeclaredVariableError,
)

Number = Union[int, float, Fraction]

FUNCS = ("sin", "cos", "exp", "ln")

_MATH_FN = {"sin": math.sin, "cos": math.cos, "exp": math.exp, "ln": math.log}

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class Chart:
    """Ordered tuple of coordinate names.

    Charts are compared by identity of their name tuples; two charts with
    the same names are interchangeable.
    """

    __slots__ = ("names", "index")

    def __init__(self, names):
        names = tuple(names)
        if not names:
            raise InputError("chart needs at least one coordinate")
        for nm in names:
            if not isinstance(nm, str) or not _NAME_RE.fullmatch(nm):
                raise InputError(f"invalid coordinate name {nm!r}")
            if nm in FUNCS:
                raise InputError(f"coordinate name {nm!r} shadows a function")
        if len(set(names)) != len(names):
            raise InputError(f"duplicate coordinate names in {names}")
        self.names = names
        self.index = {nm: i for i, nm in enumerate(names)}

    @property
    def dim(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def __eq__(self, other):
        return isinstance(other, Chart) and self.names == other.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self):
        return f"Chart{self.names}"

    def point(self, *coords):
        return ChartPoint(self, coords)


class ChartPoint:
    """A point of a chart: coordinate values in chart order."""

    __slots__ = ("chart", "coords")

    def __init__(self, chart, coords):
        coords = tuple(coords)
        if len(coords) != chart.dim:
            raise InputError(
                f"point has {len(coords)} coordinates, chart has {chart.dim}"
            )
        self.chart = chart
        self.coords = coords

    def env(self):
        return dict(zip(self.chart.names, self.coords))

    def __repr__(self):
        return f"ChartPoint{self.coords}"

    def __iter__(self):
        return iter(self.coords)


def _check_same_chart(a, b):
    if a != b:
        raise ChartMismatchError(f"charts differ: {a} vs {b}")


# ---------------------------------------------------------------------------
# interned expression nodes


class Expr:
    """One interned node.  Do not instantiate directly; use the
    constructor functions (const, var, add, ...) so folding and interning
    apply."""

    __slots__ = ("kind", "value", "name", "exponent", "args")

    def __repr__(self):
        return f"<expr {to_source(self)}>"


_TABLE: dict = {}


def _node(key, kind, value=None, name=None, exponent=None, args=()):
    hit = _TABLE.get(key)
    if hit is not None:
        return hit
    e = Expr.__new__(Expr)
    e.kind = kind
    e.value = value
    e.name = name
    e.exponent = exponent
    e.args = args
    _TABLE[key] = e
    return e


def const(v: Number) -> Expr:
    if isinstance(v, bool):
        raise InputError("boolean is not a numeric constant")
    if isinstance(v, int):
        v = Fraction(v)
    if isinstance(v, Fraction):
        return _node(("c", "q", v), "const", value=v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise InputError(f"non-finite constant {v!r}")
        return _node(("c", "f", repr(v)), "const", value=v)
    raise InputError(f"unsupported constant type {type(v).__name__}")


ZERO = const(0)
ONE = const(1)


def var(name: str) -> Expr:
    if not _NAME_RE.fullmatch(name):
        raise InputError(f"invalid variable name {name!r}")
    return _node(("v", name), "var", name=name)


def _is_zero(e):
    return e.kind == "const" and e.value == 0


def _is_one(e):
    return e.kind == "const" and e.value == 1


def _fold2(op, a, b):
    try:
        r = op(a.value, b.value)
    except ZeroDivisionError:
        raise EvaluationDomainError("division by zero", to_source(b)) from None
    except OverflowError:
        raise EvaluationDomainError("overflow", to_source(a)) from None
    return const(r)


def add(a: Expr, b: Expr) -> Expr:
    if a.kind == "const" and b.kind == "const":
        return _fold2(lambda x, y: x + y, a, b)
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return _node(("+", a, b), "add", args=(a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if a is b:
        return ZERO
    if a.kind == "const" and b.kind == "const":
        return _fold2(lambda x, y: x - y, a, b)
    if _is_zero(b):
        return a
    return _node(("-", a, b), "sub", args=(a, b))


def neg(a: Expr) -> Expr:
    return sub(ZERO, a)


def mul(a: Expr, b: Expr) -> Expr:
    if a.kind == "const" and b.kind == "const":
        return _fold2(lambda x, y: x * y, a, b)
    if _is_zero(a):
        return a
    if _is_zero(b):
        return b
    if _is_one(a):
        return b
    if _is_one(b):
        return a
    return _node(("*", a, b), "mul", args=(a, b))


def div(a: Expr, b: Expr) -> Expr:
    if b.kind == "const" and b.value == 0:
        raise EvaluationDomainError("division by zero", to_source(b))
    if _is_one(b):
        return a
    if a.kind == "const" and b.kind == "const":
        return _fold2(lambda x, y: x / y, a, b)
    if _is_zero(a):
        return a
    return _node(("/", a, b), "div", args=(a, b))


def powi(base: Expr, k: int) -> Expr:
    if not isinstance(k, int) or isinstance(k, bool):
        raise InputError("exponent must be an integer")
    if k == 0:
        return ONE
    if k == 1:
        return base
    if base.kind == "const":
        if base.value == 0 and k < 0:
            raise EvaluationDomainError("zero to a negative power", to_source(base))
        return const(base.value ** k)
    return _node(("^", base, k), "pow", exponent=k, args=(base,))


_EXACT_FUNC = {
    ("sin", 0): ZERO,
    ("cos", 0): ONE,
    ("exp", 0): ONE,
    ("ln", 1): ZERO,
}


def func(name: str, a: Expr) -> Expr:
    if name not in FUNCS:
        raise InputError(f"unknown function {name!r}")
    if a.kind == "const":
        hit = _EXACT_FUNC.get((name, a.value))
        if hit is not None:
            return hit
        if isinstance(a.value, float):
            try:
                return const(_MATH_FN[name](a.value))
            except (ValueError, OverflowError):
                raise EvaluationDomainError(
                    f"{name} outside its domain", to_source(a)
                ) from None
    return _node((name, a), "func", name=name, args=(a,))


# ---------------------------------------------------------------------------
# traversal, differentiation, evaluation


def _postorder(roots):
    """Children-first order over the expression DAG, iteratively (bracket
    towers can produce trees deeper than the recursion limit)."""
    order = []
    seen = set()
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for ch in node.args:
                if id(ch) not in seen:
                    stack.append((ch, False))
    return order


_FREE_VARS: dict = {}


def free_vars(e: Expr) -> frozenset:
    hit = _FREE_VARS.get(e)
    if hit is not None:
        return hit
    for node in _postorder([e]):
        if node in _FREE_VARS:
            continue
        if node.kind == "var":
            fv = frozenset((node.name,))
        elif node.kind == "const":
            fv = frozenset()
        else:
            fv = frozenset().union(*(_FREE_VARS[ch] for ch in node.args))
        _FREE_VARS[node] = fv
    return _FREE_VARS[e]


_DIFF: dict = {}


def diff(e: Expr, v: str) -> Expr:
    """Exact symbolic partial derivative with respect to the variable v."""
    key = (e, v)
    hit = _DIFF.get(key)
    if hit is not None:
        return hit
    for node in _postorder([e]):
        nkey = (node, v)
        if nkey in _DIFF:
            continue
        k = node.kind
        if k == "const":
            d = ZERO
        elif k == "var":
            d = ONE if node.name == v else ZERO
        elif k == "add":
            d = add(_DIFF[(node.args[0], v)], _DIFF[(node.args[1], v)])
        elif k == "sub":
            d = sub(_DIFF[(node.args[0], v)], _DIFF[(node.args[1], v)])
        elif k == "mul":
            a, b = node.args
            d = add(mul(_DIFF[(a, v)], b), mul(a, _DIFF[(b, v)]))
        elif k == "div":
            a, b = node.args
            d = div(sub(mul(_DIFF[(a, v)], b), mul(a, _DIFF[(b, v)])), powi(b, 2))
        elif k == "pow":
            (base,) = node.args
            d = mul(
                mul(const(node.exponent), powi(base, node.exponent - 1)),
                _DIFF[(base, v)],
            )
        else:
            (u,) = node.args
            du = _DIFF[(u, v)]
            if node.name == "sin":
                d = mul(func("cos", u), du)
            elif node.name == "cos":
                d = neg(mul(func("sin", u), du))
            elif node.name == "exp":
                d = mul(node, du)
            else:  # ln
                d = div(du, u)
        _DIFF[nkey] = d
    return _DIFF[key]


def evaluate(e: Expr, env: dict):
    """Evaluate at a variable assignment.  Rational subtrees evaluate to
    Fraction when every input is exact; floats are contagious; the four
    transcendental functions always return float."""
    vals: dict = {}
    for node in _postorder([e]):
        k = node.kind
        if k == "const":
            v = node.value
        elif k == "var":
            try:
                v = env[node.name]
            except KeyError:
                raise UndeclaredVariableError(node.name, tuple(env)) from None
            if isinstance(v, int):
                v = Fraction(v)
        else:
            try:
                if k == "add":
                    v = vals[id(node.args[0])] + vals[id(node.args[1])]
                elif k == "sub":
                    v = vals[id(node.args[0])] - vals[id(node.args[1])]
                elif k == "mul":
                    v = vals[id(node.args[0])] * vals[id(node.args[1])]
                elif k == "div":
                    v = vals[id(node.args[0])] / vals[id(node.args[1])]
                elif k == "pow":
                    v = vals[id(node.args[0])] ** node.exponent
                else:
                    arg = vals[id(node.args[0])]
                    if node.name == "ln" and arg <= 0:
                        raise EvaluationDomainError(
                            "ln of a nonpositive value", to_source(node)
                        )
                    v = _MATH_FN[node.name](float(arg))
            except ZeroDivisionError:
                raise EvaluationDomainError(
                    "division by zero", to_source(node)
                ) from None
            except (ValueError, OverflowError):
                raise EvaluationDomainError(
                    "value outside domain", to_source(node)
                ) from None
        vals[id(node)] = v
    return vals[id(e)]


# ---------------------------------------------------------------------------
# printing

_PREC_ADD, _PREC_NEG, _PREC_MUL, _PREC_POW, _PREC_ATOM = 10, 15, 20, 30, 100


def _const_str(v):
    if isinstance(v, Fraction):
        s = str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
    else:
        s = repr(v)
    if v < 0:
        return s, _PREC_NEG
    return s, (_PREC_MUL if isinstance(v, Fraction) and v.denominator != 1 else _PREC_ATOM)


def _render(node, out):
    """Returns (text, precedence)."""
    k = node.kind
    if k == "const":
        return _const_str(node.value)
    if k == "var":
        return node.name, _PREC_ATOM
    if k == "func":
        a, _ = out[id(node.args[0])]
        return f"{node.name}({a})", _PREC_ATOM
    if k == "pow":
        b, bp = out[id(node.args[0])]
        if bp < _PREC_ATOM:
            b = f"({b})"
        return f"{b}^{node.exponent}", _PREC_POW
    a, ap = out[id(node.args[0])]
    b, bp = out[id(node.args[1])]
    if k == "sub" and _is_zero(node.args[0]):
        if bp < _PREC_POW:
            b = f"({b})"
        return f"-{b}", _PREC_NEG
    if k in ("add", "sub"):
        sym, prec = (" + ", _PREC_ADD) if k == "add" else (" - ", _PREC_ADD)
    else:
        sym, prec = (" * ", _PREC_MUL) if k == "mul" else (" / ", _PREC_MUL)
    if ap < prec:
        a = f"({a})"
    if bp <= prec:
        b = f"({b})"
    return a + sym + b, prec


def to_source(e: Expr) -> str:
    out: dict = {}
    for node in _postorder([e]):
        out[id(node)] = _render(node, out)
    return out[id(e)][0]


# ---------------------------------------------------------------------------
# parser: infix grammar with ^ for integer powers, call syntax for functions

_NUM_RE = re.compile(r"\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?")
_INT_RE = re.compile(r"-?\d+")


class _Parser:
    def __init__(self, text, chart):
        self.text = text
        self.chart = chart
        self.pos = 0

    def error(self, msg):
        raise ExprSyntaxError(msg, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def parse(self):
        e = self.sum()
        self.skip_ws()
        if self.pos != len(self.text):
            self.error("unexpected trailing input")
        return e

    def sum(self):
        e = self.term()
        while True:
            c = self.peek()
            if c == "+":
                self.pos += 1
                e = add(e, self.term())
            elif c == "-":
                self.pos += 1
                e = sub(e, self.term())
            else:
                return e

    def term(self):
        e = self.factor()
        while True:
            c = self.peek()
            if c == "*":
                self.pos += 1
                e = mul(e, self.factor())
            elif c == "/":
                self.pos += 1
                e = div(e, self.factor())
            else:
                return e

    def factor(self):
        if self.peek() == "-":
            self.pos += 1
            return neg(self.factor())
        if self.peek() == "+":
            self.pos += 1
            return self.factor()
        return self.power()

    def power(self):
        e = self.atom()
        if self.peek() == "^":
            self.pos += 1
            self.skip_ws()
            m = _INT_RE.match(self.text, self.pos)
            if not m:
                self.error("exponent must be an integer literal")
            self.pos = m.end()
            e = powi(e, int(m.group()))
        return e

    def atom(self):
        self.skip_ws()
        if self.pos >= len(self.text):
            self.error("unexpected end of input")
        c = self.text[self.pos]
        if c == "(":
            self.pos += 1
            e = self.sum()
            self.expect(")")
            return e
        m = _NUM_RE.match(self.text, self.pos)
        if m:
            tok = m.group()
            self.pos = m.end()
            if "." in tok or "e" in tok or "E" in tok:
                # decimal literals are exact rationals; they only turn into
                # floats when evaluation forces it
                return const(Fraction(Decimal(tok)))
            return const(int(tok))
        m = _NAME_RE.match(self.text, self.pos)
        if m:
            name = m.group()
            start = self.pos
            self.pos = m.end()
            if self.peek() == "(":
                if name not in FUNCS:
                    self.pos = start
                    self.error(f"unknown function {name!r}")
                self.pos += 1
                arg = self.sum()
                self.expect(")")
                return func(name, arg)
            if name not in self.chart:
                raise UndeclaredVariableError(name, self.chart.names, start)
            return var(name)
        self.error(f"unexpected character {c!r}")


def parse(text: str, chart: Chart) -> "ScalarExpr":
    if not isinstance(text, str) or not text.strip():
        raise InputError("empty expression")
    return ScalarExpr(_Parser(text, chart).parse(), chart)


# ---------------------------------------------------------------------------
# chart-aware wrapper


def _coerce(x, chart):
    if isinstance(x, ScalarExpr):
        _check_same_chart(x.chart, chart)
        return x.expr
    if isinstance(x, (int, float, Fraction)):
        return const(x)
    raise InputError(f"cannot use {type(x).__name__} in an expression")


class ScalarExpr:
    """An expression together with the chart that declares its variables."""

    __slots__ = ("expr", "chart")

    def __init__(self, expr, chart):
        extra = free_vars(expr) - set(chart.names)
        if extra:
            raise UndeclaredVariableError(sorted(extra)[0], chart.names)
        self.expr = expr
        self.chart = chart

    @classmethod
    def constant(cls, v, chart):
        return cls(const(v), chart)

    @classmethod
    def coordinate(cls, name, chart):
        if name not in chart:
            raise UndeclaredVariableError(name, chart.names)
        return cls(var(name), chart)

    def diff(self, v: str) -> "ScalarExpr":
        if v not in self.chart:
            raise UndeclaredVariableError(v, self.chart.names)
        return ScalarExpr(diff(self.expr, v), self.chart)

    def __call__(self, point):
        if isinstance(point, ChartPoint):
            _check_same_chart(point.chart, self.chart)
            return evaluate(self.expr, point.env())
        return evaluate(self.expr, dict(point))

    @property
    def is_zero(self):
        return _is_zero(self.expr)

    def __add__(self, other):
        return ScalarExpr(add(self.expr, _coerce(other, self.chart)), self.chart)

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarExpr(sub(self.expr, _coerce(other, self.chart)), self.chart)

    def __rsub__(self, other):
        return ScalarExpr(sub(_coerce(other, self.chart), self.expr), self.chart)

    def __mul__(self, other):
        return ScalarExpr(mul(self.expr, _coerce(other, self.chart)), self.chart)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarExpr(div(self.expr, _coerce(other, self.chart)), self.chart)

    def __rtruediv__(self, other):
        return ScalarExpr(div(_coerce(other, self.chart), self.expr), self.chart)

    def __pow__(self, k):
        return ScalarExpr(powi(self.expr, k), self.chart)

    def __neg__(self):
        return ScalarExpr(neg(self.expr), self.chart)

    def __eq__(self, other):
        return (
            isinstance(other, ScalarExpr)
            and self.expr is other.expr
            and self.chart == other.chart
        )

    def __hash__(self):
        return hash((id(self.expr), self.chart))

    def __str__(self):
        return to_source(self.expr)

    def __repr__(self):
        return f"ScalarExpr({to_source(self.expr)!r})"


def coordinates(chart: Chart):
    """All coordinate functions of a chart, in order."""
    return tuple(ScalarExpr(var(nm), chart) for nm in chart.names)
