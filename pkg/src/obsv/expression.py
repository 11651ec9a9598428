"""Scalar arithmetic expressions for scenario files.

Grammar (EBNF, whitespace insignificant)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = atom [ "^" unary ] ;            (* right associative *)
    atom    = number | name | func "(" expr ")" | "(" expr ")" ;
    number  = digits [ "." { digit } ] [ exponent ]
            | "." digits [ exponent ] ;
    exponent = ("e" | "E") [ "+" | "-" ] digits ;
    name    = "t" | "y" | "u" digits | "x" digits ;
    func    = "sin" | "cos" | "exp" | "tanh" | "abs" | "sat" ;

``^`` binds tighter than unary minus, so ``-x1^2`` is ``-(x1^2)``.
Evaluation works on floats or on numpy arrays (elementwise). Division by
zero, a negative base under a non-integer exponent, and any non-finite
result raise :class:`EvaluationError` instead of propagating NaN.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EvaluationError, ObsvError

__all__ = [
    "Expr", "Num", "Var", "Neg", "BinOp", "Call",
    "ParseError", "UnknownIdentifier",
    "parse", "evaluate", "compile_expr", "variables", "to_source", "FUNCTIONS",
]


class ParseError(ObsvError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} at byte {offset}")


class UnknownIdentifier(ParseError):
    def __init__(self, name, offset):
        self.name = name
        ObsvError.__init__(self, f"unknown identifier {name!r} at byte {offset}")
        self.offset = offset


class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


def _sat(v):
    if isinstance(v, float):
        return -1.0 if v < -1.0 else (1.0 if v > 1.0 else v)
    return np.clip(v, -1.0, 1.0)


FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "abs": np.abs,
    "sat": _sat,
}

_VAR_RE = re.compile(r"^(t|y|u[1-9][0-9]*|x[1-9][0-9]*)$")
_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)


def _tokenize(src: str):
    pos = 0
    tokens = []
    while True:
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            rest = src[pos:]
            if rest.strip() == "":
                break
            bad = pos + (len(rest) - len(rest.lstrip()))
            raise ParseError(f"unexpected character {src[bad]!r}", _byte_offset(src, bad))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


def _byte_offset(src, char_pos):
    return len(src[:char_pos].encode("utf-8"))


class _Parser:
    def __init__(self, src):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ParseError(message, _byte_offset(self.src, tok[2]))

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] != "op":
            raise self.error(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok)

    def parse(self):
        if self.peek()[0] == "end":
            raise self.error("empty expression")
        e = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected {self.peek()[1]!r}")
        return e

    def expr(self):
        left = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self):
        left = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        kind, text, pos = tok
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if _VAR_RE.match(text):
                return Var(text)
            raise UnknownIdentifier(text, _byte_offset(self.src, pos))
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise self.error(f"unexpected {text or 'end of input'!r}", tok)


@lru_cache(maxsize=1024)
def _parse_cached(src: str) -> Expr:
    return _Parser(src).parse()


def parse(src: str) -> Expr:
    if isinstance(src, bytes):
        src = src.decode("utf-8")
    return _parse_cached(src)


def variables(e: Expr) -> frozenset:
    """Names of all variables referenced in ``e``."""
    if isinstance(e, Var):
        return frozenset([e.name])
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, Call):
        return variables(e.arg)
    return variables(e.left) | variables(e.right)


def to_source(e: Expr) -> str:
    """Fully parenthesised source text that reparses to the same tree."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.operand)})"
    if isinstance(e, Call):
        return f"{e.func}({to_source(e.arg)})"
    return f"({to_source(e.left)} {e.op} {to_source(e.right)})"


def _div(a, b):
    if isinstance(b, float):
        if b == 0:
            raise EvaluationError("division by zero")
        return a / b
    if np.any(np.asarray(b) == 0):
        raise EvaluationError("division by zero")
    return a / b


def _pow(a, b):
    if isinstance(a, float) and isinstance(b, float):
        if a < 0 and b != round(b):
            raise EvaluationError("negative base with non-integer exponent")
        if a == 0 and b < 0:
            raise EvaluationError("division by zero")
        return np.float64(a) ** b
    a_arr = np.asarray(a)
    b_arr = np.asarray(b)
    bad = (a_arr < 0) & (b_arr != np.round(b_arr))
    if np.any(bad):
        raise EvaluationError("negative base with non-integer exponent")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise EvaluationError("division by zero")
    return np.power(a, b)


_BINOPS = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _div,
    "^": _pow,
}


def _compile(e: Expr):
    if isinstance(e, Num):
        v = float(e.value)
        return lambda env: v
    if isinstance(e, Var):
        name = e.name

        def load(env):
            try:
                return env[name]
            except KeyError:
                raise EvaluationError(f"unbound variable {name!r}") from None
        return load
    if isinstance(e, Neg):
        inner = _compile(e.operand)
        return lambda env: -inner(env)
    if isinstance(e, Call):
        fn = FUNCTIONS[e.func]
        inner = _compile(e.arg)
        return lambda env: fn(inner(env))
    op = _BINOPS[e.op]
    left = _compile(e.left)
    right = _compile(e.right)
    return lambda env: op(left(env), right(env))


@lru_cache(maxsize=1024)
def compile_expr(e: Expr):
    """Return ``fn(bindings) -> value`` with the same error contract as :func:`evaluate`."""
    raw = _compile(e)

    def fn(env):
        with np.errstate(all="ignore"):
            v = raw(env)
        if isinstance(v, float):
            if not math.isfinite(v):
                raise EvaluationError("non-finite result", point=dict(env))
            return v
        if not np.all(np.isfinite(v)):
            raise EvaluationError("non-finite result", point=dict(env))
        return v
    return fn


def evaluate(e: Expr, bindings) -> float:
    """Evaluate ``e``; bindings map variable names to floats or arrays."""
    v = compile_expr(e)(bindings)
    if np.ndim(v) == 0:
        return float(v)
    return v
