"""Arithmetic expressions for potentials and endomorphism entries.

Grammar (whitespace-insensitive)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?           # right-associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

As in ordinary notation ``-x^2`` means ``-(x^2)`` and ``2^-1`` is 0.5.
Names are the coordinates ``x, y, theta, phi`` and the constant ``pi``;
functions are ``sin cos exp sqrt abs min max``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = ("x", "y", "theta", "phi")
CONSTANTS = {"pi": float(np.pi)}
FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "sqrt": 1, "abs": 1, "min": 2, "max": 2}


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]

_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.))")


def _tokenize(src: str):
    toks = []
    pos = 0
    raw = src.encode("utf-8")
    # work on the decoded string but report byte offsets
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            break
        num, name, sym = m.groups()
        start = m.end() - len((num or name or sym or ""))
        byte_off = len(src[:start].encode("utf-8"))
        if num:
            toks.append(("num", num, byte_off))
        elif name:
            toks.append(("name", name, byte_off))
        elif sym:
            if sym not in "+-*/^(),":
                raise ParseError(f"unexpected character {sym!r}", byte_off)
            toks.append(("sym", sym, byte_off))
        pos = m.end()
    toks.append(("end", "", len(raw)))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, sym):
        t = self.peek()
        if t[0] != "sym" or t[1] != sym:
            what = "end of input" if t[0] == "end" else repr(t[1])
            raise ParseError(f"expected {sym!r}, found {what}", t[2])
        return self.take()

    def expr(self):
        node = self.term()
        while self.peek()[0] == "sym" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "sym" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    # unary minus binds looser than ^, so -x^2 = -(x^2); the exponent may
    # itself be negated (2^-1)
    def unary(self):
        if self.peek()[0] == "sym" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "sym" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, text, off = self.peek()
        if kind == "num":
            self.take()
            return Num(float(text))
        if kind == "name":
            self.take()
            if self.peek()[0] == "sym" and self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function {text!r}", off)
                self.take()
                args = [self.expr()]
                while self.peek()[0] == "sym" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ParseError(f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)}", off)
                return Call(text, tuple(args))
            if text in VARIABLES:
                return Var(text)
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            raise ParseError(f"unknown identifier {text!r}", off)
        if kind == "sym" and text == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ParseError(f"unexpected {what}", off)


def parse_expr(source: str) -> Expr:
    p = _Parser(source)
    node = p.expr()
    kind, text, off = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected trailing {text!r}", off)
    return node


def to_source(e: Expr) -> str:
    """Fully parenthesized source text; ``parse_expr(to_source(e)) == e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.arg)})"
    if isinstance(e, BinOp):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(to_source(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


def variables(e: Expr) -> set:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return variables(e.arg)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        out = set()
        for a in e.args:
            out |= variables(a)
        return out
    return set()


def evaluate(e: Expr, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Vectorized evaluation; raises :class:`EvaluationError` with the first bad index."""
    with np.errstate(all="ignore"):
        return _eval(e, env)


def _fail(message, mask):
    idx = int(np.flatnonzero(np.atleast_1d(mask))[0])
    err = EvaluationError(f"{message} at node {idx}")
    err.index = idx
    raise err


def _eval(e, env):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        if e.name not in env:
            raise EvaluationError(f"variable {e.name!r} is not a coordinate of this domain")
        return np.asarray(env[e.name], dtype=float)
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, BinOp):
        a = _eval(e.left, env)
        b = _eval(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            bad = np.broadcast_to(b == 0, np.broadcast(a, b).shape)
            if np.any(bad):
                _fail("division by zero", bad)
            return a / b
        out = np.power(a, b)
        bad = ~np.isfinite(out) & np.isfinite(np.broadcast_to(a, out.shape))
        if np.any(bad):
            _fail("invalid power", bad)
        return out
    if isinstance(e, Call):
        args = [_eval(a, env) for a in e.args]
        if e.fn == "sqrt":
            bad = args[0] < 0
            if np.any(bad):
                _fail("sqrt of negative value", bad)
            return np.sqrt(args[0])
        if e.fn == "min":
            return np.minimum(args[0], args[1])
        if e.fn == "max":
            return np.maximum(args[0], args[1])
        return {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}[e.fn](args[0])
    raise TypeError(f"not an expression node: {e!r}")
