"""A small real-valued expression language for metric components.

Grammar (whitespace is insignificant)::

    expr     := term (("+" | "-") term)*
    term     := unary (("*" | "/") unary)*
    unary    := "-" unary | power
    power    := atom ("^" exponent)*
    exponent := NUMBER | "-" exponent | "(" exponent ")"
    atom     := NUMBER | NAME | NAME "(" expr ")" | "(" expr ")"

``^`` binds tighter than unary minus, so ``-u^2`` is ``-(u^2)``.  Exponents
must be numeric literals.  Functions are ``exp``, ``ln``, ``sin``, ``cos``
and ``sqrt``.  There is no implicit multiplication.

Expressions evaluate over floats, numpy arrays or :class:`~walkerlab.jets.Jet`
values.  Internally the module can also differentiate and substitute
expressions; the catalog and the transformations rely on this to build
exact derived quantities such as ``H1 = dH/dxp at xp = 0``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import jets
from .jets import Jet

FUNCTIONS = ("exp", "ln", "sin", "cos", "sqrt")


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    """Syntax error with the byte offset and a description of what was expected."""

    def __init__(self, offset, expected, found, source=""):
        self.offset = offset
        self.expected = expected
        self.found = found
        self.source = source
        super().__init__(f"syntax error at offset {offset}: expected {expected}, found {found}")


class UnboundVariableError(ExprError):
    def __init__(self, name, offset=None):
        self.name = name
        self.offset = offset
        where = "" if offset is None else f" (offset {offset})"
        super().__init__(f"unbound variable '{name}'{where}")


class ExprDomainError(ExprError):
    def __init__(self, message, offset=None):
        self.offset = offset
        where = "" if offset is None else f" at offset {offset}"
        super().__init__(f"{message}{where}")


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Expr:
    """Base class of expression nodes.  Nodes are immutable and hashable."""

    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, float(p))

    def __str__(self):
        return to_string(self)

    @cached_property
    def free_vars(self):
        return frozenset(_free_vars(self))

    @cached_property
    def _compiled(self):
        return _compile(self)

    def evaluate(self, env):
        """Evaluate with ``env`` mapping names to floats, arrays or jets."""
        return self._compiled(env)


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    arg: Expr
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Add(Expr):
    left: Expr
    right: Expr
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Sub(Expr):
    left: Expr
    right: Expr
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Mul(Expr):
    left: Expr
    right: Expr
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Div(Expr):
    left: Expr
    right: Expr
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Pow(Expr):
    base: Expr
    exponent: float
    pos: int = field(default=0, compare=False, repr=False)


@dataclass(frozen=True, eq=True)
class Call(Expr):
    fn: str
    arg: Expr
    pos: int = field(default=0, compare=False, repr=False)


ZERO = Num(0.0)
ONE = Num(1.0)


def as_expr(x):
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        return parse(x)
    return Num(float(x))


def is_zero(e):
    return isinstance(e, Num) and e.value == 0.0


def is_const(e):
    return isinstance(e, Num)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(src):
    toks = []
    i = 0
    n = len(src)
    while i < n:
        if src[i].isspace():
            i += 1
            continue
        m = _TOKEN.match(src, i)
        if not m or m.end() == i:
            raise ParseError(i, "number, name, operator or parenthesis", repr(src[i]), src)
        start = m.start(m.lastgroup)
        toks.append((m.lastgroup, m.group(m.lastgroup), start))
        i = m.end()
    toks.append(("end", "", n))
    return toks


class _Parser:
    def __init__(self, src):
        self.src = src
        self.toks = _tokenize(src)
        self.k = 0

    def peek(self):
        return self.toks[self.k]

    def take(self):
        t = self.toks[self.k]
        self.k += 1
        return t

    def fail(self, expected):
        kind, text, pos = self.peek()
        found = "end of input" if kind == "end" else repr(text)
        raise ParseError(pos, expected, found, self.src)

    def expect_op(self, op):
        kind, text, pos = self.peek()
        if kind == "op" and text == op:
            return self.take()
        self.fail(repr(op))

    def parse(self):
        e = self.expr()
        if self.peek()[0] != "end":
            self.fail("operator or end of input")
        return e

    def expr(self):
        left = self.term()
        while True:
            kind, text, pos = self.peek()
            if kind == "op" and text in "+-":
                self.take()
                right = self.term()
                left = Add(left, right, pos) if text == "+" else Sub(left, right, pos)
            else:
                return left

    def term(self):
        left = self.unary()
        while True:
            kind, text, pos = self.peek()
            if kind == "op" and text in "*/":
                self.take()
                right = self.unary()
                left = Mul(left, right, pos) if text == "*" else Div(left, right, pos)
            else:
                return left

    def unary(self):
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary(), pos)
        return self.power()

    def power(self):
        base = self.atom()
        while True:
            kind, text, pos = self.peek()
            if kind == "op" and text == "^":
                self.take()
                base = Pow(base, self.exponent(), pos)
            else:
                return base

    def exponent(self):
        kind, text, pos = self.peek()
        if kind == "num":
            self.take()
            return float(text)
        if kind == "op" and text == "-":
            self.take()
            return -self.exponent()
        if kind == "op" and text == "(":
            self.take()
            val = self.exponent()
            self.expect_op(")")
            return val
        self.fail("numeric literal exponent")

    def atom(self):
        kind, text, pos = self.peek()
        if kind == "num":
            self.take()
            return Num(float(text), pos)
        if kind == "name":
            self.take()
            nk, nt, _ = self.peek()
            if nk == "op" and nt == "(":
                if text not in FUNCTIONS:
                    raise ParseError(pos, f"one of the functions {', '.join(FUNCTIONS)}", repr(text), self.src)
                self.take()
                arg = self.expr()
                self.expect_op(")")
                return Call(text, arg, pos)
            if text in FUNCTIONS:
                self.fail(f"'(' after function name {text}")
            return Var(text, pos)
        if kind == "op" and text == "(":
            self.take()
            e = self.expr()
            self.expect_op(")")
            return e
        self.fail("number, name or '('")


def parse(source: str) -> Expr:
    """Parse ``source`` into an expression tree."""
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# Canonical printer
# ---------------------------------------------------------------------------

def _num_str(x):
    if not math.isfinite(x):
        raise ExprError(f"cannot print non-finite literal {x}")
    return repr(float(x))


def to_string(e: Expr) -> str:
    """Fully parenthesized canonical text; ``parse(to_string(e)) == e``."""
    if isinstance(e, Num):
        s = _num_str(abs(e.value))
        return f"(-{s})" if e.value < 0 or (e.value == 0 and math.copysign(1, e.value) < 0) else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_string(e.arg)})"
    if isinstance(e, (Add, Sub, Mul, Div)):
        op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
        return f"({to_string(e.left)} {op} {to_string(e.right)})"
    if isinstance(e, Pow):
        ex = _num_str(abs(e.exponent))
        if e.exponent < 0:
            ex = f"(-{ex})"
        return f"({to_string(e.base)}^{ex})"
    if isinstance(e, Call):
        return f"{e.fn}({to_string(e.arg)})"
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _guard(fn, pos):
    def run(x):
        try:
            return fn(x)
        except jets.JetDomainError as exc:
            raise ExprDomainError(str(exc), pos) from None
    return run


_FN_IMPL = {"exp": jets.exp, "ln": jets.log, "sin": jets.sin, "cos": jets.cos, "sqrt": jets.sqrt}


def _compile(e):
    if isinstance(e, Num):
        v = e.value
        return lambda env: v
    if isinstance(e, Var):
        name, pos = e.name, e.pos

        def var(env):
            try:
                return env[name]
            except KeyError:
                raise UnboundVariableError(name, pos) from None
        return var
    if isinstance(e, Neg):
        f = _compile(e.arg)
        return lambda env: -f(env)
    if isinstance(e, Add):
        f, g = _compile(e.left), _compile(e.right)
        return lambda env: f(env) + g(env)
    if isinstance(e, Sub):
        f, g = _compile(e.left), _compile(e.right)
        return lambda env: f(env) - g(env)
    if isinstance(e, Mul):
        f, g = _compile(e.left), _compile(e.right)
        return lambda env: f(env) * g(env)
    if isinstance(e, Div):
        f, g = _compile(e.left), _compile(e.right)
        pos = e.pos

        def divide(env):
            den = g(env)
            dv = den.value if isinstance(den, Jet) else np.asarray(den)
            if np.any(dv == 0):
                raise ExprDomainError("division by zero", pos)
            return f(env) / den
        return divide
    if isinstance(e, Pow):
        f = _compile(e.base)
        p = e.exponent
        run = _guard(lambda x: jets.power(x, p), e.pos)
        return lambda env: run(f(env))
    if isinstance(e, Call):
        f = _compile(e.arg)
        run = _guard(_FN_IMPL[e.fn], e.pos)
        return lambda env: run(f(env))
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(expr, env):
    """Evaluate ``expr`` (an :class:`Expr` or source text) in ``env``."""
    return as_expr(expr).evaluate(env)


def _free_vars(e):
    if isinstance(e, Var):
        yield e.name
    elif isinstance(e, (Neg, Pow, Call)):
        yield from _free_vars(e.arg if not isinstance(e, Pow) else e.base)
    elif isinstance(e, (Add, Sub, Mul, Div)):
        yield from _free_vars(e.left)
        yield from _free_vars(e.right)


# ---------------------------------------------------------------------------
# Smart constructors with light constant folding
# ---------------------------------------------------------------------------

def add(a, b):
    if is_zero(a):
        return b
    if is_zero(b):
        return a
    if is_const(a) and is_const(b):
        return Num(a.value + b.value)
    return Add(a, b)


def sub(a, b):
    if is_zero(b):
        return a
    if is_zero(a):
        return neg(b)
    if is_const(a) and is_const(b):
        return Num(a.value - b.value)
    return Sub(a, b)


def mul(a, b):
    if is_zero(a) or is_zero(b):
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if is_const(a) and is_const(b):
        return Num(a.value * b.value)
    return Mul(a, b)


def div(a, b):
    if b == ONE:
        return a
    if is_zero(a):
        return ZERO
    if is_const(a) and is_const(b) and b.value != 0:
        return Num(a.value / b.value)
    return Div(a, b)


def neg(a):
    if is_const(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def pow_(a, p):
    if p == 0.0:
        return ONE
    if p == 1.0:
        return a
    if is_const(a):
        if a.value == 0.0 and p > 0:
            return ZERO
        if a.value > 0 or float(p).is_integer():
            return Num(float(a.value) ** p)
    return Pow(a, p)


def call(fn, a):
    if is_const(a):
        v = a.value
        if fn == "exp":
            return Num(math.exp(v))
        if fn == "sin":
            return Num(math.sin(v))
        if fn == "cos":
            return Num(math.cos(v))
        if fn == "ln" and v > 0:
            return Num(math.log(v))
        if fn == "sqrt" and v > 0:
            return Num(math.sqrt(v))
    return Call(fn, a)


def simplify(e):
    """Rebuild ``e`` bottom-up through the folding constructors."""
    if isinstance(e, (Num, Var)):
        return e
    if isinstance(e, Neg):
        return neg(simplify(e.arg))
    if isinstance(e, Add):
        return add(simplify(e.left), simplify(e.right))
    if isinstance(e, Sub):
        return sub(simplify(e.left), simplify(e.right))
    if isinstance(e, Mul):
        return mul(simplify(e.left), simplify(e.right))
    if isinstance(e, Div):
        return div(simplify(e.left), simplify(e.right))
    if isinstance(e, Pow):
        return pow_(simplify(e.base), e.exponent)
    if isinstance(e, Call):
        return call(e.fn, simplify(e.arg))
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# Substitution and differentiation (internal tooling)
# ---------------------------------------------------------------------------

def substitute(e, mapping):
    """Replace variables by expressions; ``mapping`` values may be numbers or text."""
    mapping = {k: as_expr(v) for k, v in mapping.items()}
    return _subst(as_expr(e), mapping)


def _subst(e, m):
    if isinstance(e, Num):
        return e
    if isinstance(e, Var):
        return m.get(e.name, e)
    if isinstance(e, Neg):
        return neg(_subst(e.arg, m))
    if isinstance(e, Add):
        return add(_subst(e.left, m), _subst(e.right, m))
    if isinstance(e, Sub):
        return sub(_subst(e.left, m), _subst(e.right, m))
    if isinstance(e, Mul):
        return mul(_subst(e.left, m), _subst(e.right, m))
    if isinstance(e, Div):
        return div(_subst(e.left, m), _subst(e.right, m))
    if isinstance(e, Pow):
        return pow_(_subst(e.base, m), e.exponent)
    if isinstance(e, Call):
        return call(e.fn, _subst(e.arg, m))
    raise TypeError(f"not an expression node: {e!r}")


def diff(e, name):
    """Exact partial derivative of ``e`` with respect to the variable ``name``."""
    e = as_expr(e)
    if name not in e.free_vars:
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Neg):
        return neg(diff(e.arg, name))
    if isinstance(e, Add):
        return add(diff(e.left, name), diff(e.right, name))
    if isinstance(e, Sub):
        return sub(diff(e.left, name), diff(e.right, name))
    if isinstance(e, Mul):
        return add(mul(diff(e.left, name), e.right), mul(e.left, diff(e.right, name)))
    if isinstance(e, Div):
        num = sub(mul(diff(e.left, name), e.right), mul(e.left, diff(e.right, name)))
        return div(num, pow_(e.right, 2.0))
    if isinstance(e, Pow):
        p = e.exponent
        return mul(mul(Num(p), pow_(e.base, p - 1.0)), diff(e.base, name))
    if isinstance(e, Call):
        a = e.arg
        da = diff(a, name)
        if e.fn == "exp":
            outer = e
        elif e.fn == "ln":
            outer = div(ONE, a)
        elif e.fn == "sin":
            outer = call("cos", a)
        elif e.fn == "cos":
            outer = neg(call("sin", a))
        elif e.fn == "sqrt":
            outer = div(Num(0.5), e)
        else:  # pragma: no cover - parser only admits known functions
            raise ExprError(f"unknown function {e.fn}")
        return mul(outer, da)
    raise TypeError(f"not an expression node: {e!r}")
