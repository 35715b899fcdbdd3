"""Small arithmetic grammar for datum expressions.

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('-' | '+')* atom
    atom   := NUMBER | 'x'K | FUNC '(' expr ')' | '(' expr ')'
    FUNC   := 'sin' | 'cos' | 'exp'

Coordinates are x1..xd.  Constant subtrees are folded, and affine subtrees
collapse to a single linear-form node so that bounds stay tight.
"""

from __future__ import annotations

import re

import numpy as np

from .exprs import (
    Const,
    CosP,
    ExpP,
    LinearForm,
    Product,
    Quotient,
    Scale,
    SinP,
    Sum,
    Unary,
)


class ParseError(ValueError):
    def __init__(self, message, text, pos):
        super().__init__(f"{message} at position {pos}: {text!r}")
        self.pos = pos


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/()]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip() == "":
                break
            raise ParseError("unexpected character", text, pos)
        if m.lastgroup == "num":
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


# folding helpers ------------------------------------------------------------

def _is_const(e):
    return isinstance(e, Const)


def _as_linear(e):
    """Return (weights, offset) when e is affine, else None."""
    if isinstance(e, Const):
        return np.zeros(e.dim), e.value
    if isinstance(e, LinearForm):
        return e.weights.copy(), e.offset
    return None


def _make_add(a, b, sign):
    la, lb = _as_linear(a), _as_linear(b)
    if la is not None and lb is not None:
        w = la[0] + sign * lb[0]
        c = la[1] + sign * lb[1]
        if not w.any():
            return Const(c, a.dim)
        return LinearForm(w, c)
    if sign < 0:
        b = Scale(-1.0, b)
    if isinstance(a, Sum):
        return Sum(a.terms + [b])
    return Sum([a, b])


def _make_mul(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value, a.dim)
    for c, other in ((a, b), (b, a)):
        if _is_const(c):
            lin = _as_linear(other)
            if lin is not None:
                return LinearForm(c.value * lin[0], c.value * lin[1])
            return Scale(c.value, other)
    return Product(a, b)


def _make_div(a, b, text, pos):
    if _is_const(b):
        if b.value == 0.0:
            raise ParseError("division by constant zero", text, pos)
        return _make_mul(Const(1.0 / b.value, b.dim), a)
    return Quotient(a, b)


_FUNCS = {"sin": SinP, "cos": CosP, "exp": ExpP}


class _Parser:
    def __init__(self, text, dim):
        self.text = text
        self.dim = dim
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", self.text, pos)

    def parse(self):
        e = self.expr()
        kind, _, pos = self.peek()
        if kind != "end":
            raise ParseError("trailing input", self.text, pos)
        return e

    def expr(self):
        e = self.term()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.term()
                e = _make_add(e, rhs, 1 if val == "+" else -1)
            else:
                return e

    def term(self):
        e = self.factor()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.factor()
                e = _make_mul(e, rhs) if val == "*" else _make_div(
                    e, rhs, self.text, pos)
            else:
                return e

    def factor(self):
        sign = 1.0
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                if val == "-":
                    sign = -sign
            else:
                break
        e = self.atom()
        return e if sign > 0 else _make_mul(Const(-1.0, self.dim), e)

    def atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return Const(val, self.dim)
        if kind == "name":
            if val in _FUNCS:
                self.expect_op("(")
                inner = self.expr()
                self.expect_op(")")
                return Unary(_FUNCS[val](), inner)
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                k = int(m.group(1))
                if not 1 <= k <= self.dim:
                    raise ParseError(
                        f"coordinate {val} out of range for dimension {self.dim}",
                        self.text, pos)
                w = np.zeros(self.dim)
                w[k - 1] = 1.0
                return LinearForm(w, 0.0)
            raise ParseError(f"unknown symbol {val!r}", self.text, pos)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise ParseError("expected a number, coordinate, or '('", self.text, pos)


def parse_expression(text, dim):
    """Parse a datum formula over coordinates x1..x{dim} into an expression."""
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    return _Parser(text, dim).parse()
