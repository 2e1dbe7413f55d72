"""Whitelisted scalar-field expressions over the state space.

Model coefficients (branching coefficients, drifts, test functions) are
given in config files as expressions from a deliberately small grammar:

    expr   := term ('+' term)*
    term   := factor ('*' factor)*
    factor := NUMBER | 'gauss' | 'x1'
            | 'clamp' '(' expr ',' NUMBER ',' NUMBER ')'
            | '(' expr ')'

``gauss`` is exp(-|x|^2) (the spelling ``exp(-|x|^2)`` is accepted as an
alias) and ``x1`` is the first coordinate.  Numbers may carry a sign.
Everything evaluates vectorised over an (n, d) array of points.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np


class FieldSyntaxError(ValueError):
    pass


_GAUSS_ALIAS = "exp(-|x|^2)"
_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<gauss_alias>exp\(\s*-\s*\|x\|\s*\^\s*2\s*\))"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<number>[-+]?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)"
    r"|(?P<punct>[(),+*])"
    r")"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise FieldSyntaxError(f"field expression: bad token at column {pos + 1}: {text[pos:pos + 12]!r}")
        if m.lastgroup == "gauss_alias":
            tokens.append(("name", "gauss"))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name")))
        elif m.lastgroup == "number":
            tokens.append(("number", m.group("number")))
        else:
            tokens.append(("punct", m.group("punct")))
        pos = m.end()
    return tokens


# AST: ("num", v) | ("gauss",) | ("x1",) | ("add", l, r) | ("mul", l, r)
#    | ("clamp", e, lo, hi)


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else ("end", "")

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, kind, value=None):
        tok = self.take()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise FieldSyntaxError(f"field expression: expected {value or kind}, got {tok[1]!r}")
        return tok

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise FieldSyntaxError(f"field expression: trailing input {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("punct", "+"):
            self.take()
            node = ("add", node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek() == ("punct", "*"):
            self.take()
            node = ("mul", node, self.factor())
        return node

    def factor(self):
        kind, val = self.take()
        if kind == "number":
            return ("num", float(val))
        if kind == "name":
            if val == "gauss":
                return ("gauss",)
            if val == "x1":
                return ("x1",)
            if val == "clamp":
                self.expect("punct", "(")
                inner = self.expr()
                self.expect("punct", ",")
                lo = float(self.expect("number")[1])
                self.expect("punct", ",")
                hi = float(self.expect("number")[1])
                self.expect("punct", ")")
                if not lo <= hi:
                    raise FieldSyntaxError("field expression: clamp bounds out of order")
                return ("clamp", inner, lo, hi)
            raise FieldSyntaxError(f"field expression: unknown name {val!r} (allowed: gauss, x1, clamp)")
        if (kind, val) == ("punct", "("):
            inner = self.expr()
            self.expect("punct", ")")
            return inner
        raise FieldSyntaxError(f"field expression: unexpected {val!r}")


def _eval(node, pts: np.ndarray) -> np.ndarray:
    op = node[0]
    if op == "num":
        return np.full(pts.shape[0], node[1])
    if op == "gauss":
        return np.exp(-np.sum(pts * pts, axis=1))
    if op == "x1":
        return pts[:, 0].copy()
    if op == "add":
        return _eval(node[1], pts) + _eval(node[2], pts)
    if op == "mul":
        return _eval(node[1], pts) * _eval(node[2], pts)
    if op == "clamp":
        return np.clip(_eval(node[1], pts), node[2], node[3])
    raise AssertionError(op)


def _bounds(node) -> tuple[float, float]:
    op = node[0]
    if op == "num":
        return node[1], node[1]
    if op == "gauss":
        return 0.0, 1.0
    if op == "x1":
        return -math.inf, math.inf
    if op == "add":
        (a, b), (c, d) = _bounds(node[1]), _bounds(node[2])
        return a + c, b + d
    if op == "mul":
        (a, b), (c, d) = _bounds(node[1]), _bounds(node[2])
        prods = [x * y for x in (a, b) for y in (c, d) if not math.isnan(x * y)]
        return min(prods), max(prods)
    if op == "clamp":
        lo, hi = _bounds(node[1])
        return min(max(lo, node[2]), node[3]), min(max(hi, node[2]), node[3])
    raise AssertionError(op)


def _gauss_affine(node):
    """Decompose as a + b*gauss, or None if not of that shape."""
    op = node[0]
    if op == "num":
        return node[1], 0.0
    if op == "gauss":
        return 0.0, 1.0
    if op == "add":
        l, r = _gauss_affine(node[1]), _gauss_affine(node[2])
        if l is None or r is None:
            return None
        return l[0] + r[0], l[1] + r[1]
    if op == "mul":
        l, r = _gauss_affine(node[1]), _gauss_affine(node[2])
        if l is None or r is None:
            return None
        if l[1] == 0.0:
            return l[0] * r[0], l[0] * r[1]
        if r[1] == 0.0:
            return r[0] * l[0], r[0] * l[1]
        return None  # gauss * gauss leaves the affine family
    return None


@dataclass(frozen=True)
class ScalarField:
    """Compiled field: callable over points, with structural metadata."""

    source: str
    ast: tuple

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = _eval(self.ast, pts)
        # cemetery points are encoded as all-NaN rows; functions vanish there
        dead = np.isnan(pts).any(axis=1)
        if dead.any():
            out = np.where(dead, 0.0, out)
        return out

    def at(self, pt) -> float:
        """Evaluate at a single point."""
        return float(self(np.atleast_2d(pt))[0])

    def bounds(self) -> tuple[float, float]:
        return _bounds(self.ast)

    @property
    def is_constant(self) -> bool:
        lo, hi = self.bounds()
        return lo == hi

    def constant_value(self) -> float:
        lo, hi = self.bounds()
        if lo != hi:
            raise ValueError(f"field {self.source!r} is not constant")
        return lo

    def gauss_affine(self):
        """(a, b) with f = a + b*exp(-|x|^2), or None."""
        return _gauss_affine(self.ast)


def parse_field(text) -> ScalarField:
    """Compile a whitelisted expression (or a bare number) to a ScalarField."""
    if isinstance(text, (int, float)):
        text = repr(float(text))
    ast = _Parser(_tokenize(text.strip())).parse()
    return ScalarField(source=text.strip(), ast=ast)


def constant_field(value: float) -> ScalarField:
    return parse_field(repr(float(value)))
