"""Tiny recursive-descent parser for time-signal expressions.

Grammar (whitespace insensitive)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := number | 't' | func '(' expr ')' | '(' expr ')' | '-' factor
    func   := 'sin' | 'cos' | 'exp'

Parsing reports syntax errors with the byte offset of the offending
character.  Division is evaluated lazily: dividing by zero is an
evaluation-time error, not a parse error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import SignalEvalError, SignalSyntaxError

__all__ = ["SignalExpr", "parse_signal"]

_FUNCTIONS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}


@dataclass
class SignalExpr:
    """Parsed expression tree over the variable t.

    Nodes are tuples: ("num", v), ("t",), ("neg", a), ("bin", op, a, b),
    ("call", name, a).
    """

    root: tuple
    source: str

    def __call__(self, t: float) -> float:
        return _eval(self.root, float(t))

    def eval(self, t: float) -> float:
        return self(t)


def _eval(node: tuple, t: float) -> float:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "t":
        return t
    if kind == "neg":
        return -_eval(node[1], t)
    if kind == "call":
        return _FUNCTIONS[node[1]](_eval(node[2], t))
    op, a, b = node[1], _eval(node[2], t), _eval(node[3], t)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0.0:
        raise SignalEvalError(f"division by zero at t = {t}")
    return a / b


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0

    def error(self, message: str):
        raise SignalSyntaxError(message, self.pos)

    def skip_ws(self):
        while self.pos < len(self.src) and self.src[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def accept(self, ch: str) -> bool:
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def expect(self, ch: str):
        if not self.accept(ch):
            self.error(f"expected {ch!r}")

    def parse(self) -> tuple:
        node = self.expr()
        self.skip_ws()
        if self.pos != len(self.src):
            self.error(f"unexpected character {self.src[self.pos]!r}")
        return node

    def expr(self) -> tuple:
        node = self.term()
        while True:
            if self.accept("+"):
                node = ("bin", "+", node, self.term())
            elif self.accept("-"):
                node = ("bin", "-", node, self.term())
            else:
                return node

    def term(self) -> tuple:
        node = self.factor()
        while True:
            if self.accept("*"):
                node = ("bin", "*", node, self.factor())
            elif self.accept("/"):
                node = ("bin", "/", node, self.factor())
            else:
                return node

    def factor(self) -> tuple:
        ch = self.peek()
        if ch == "":
            self.error("unexpected end of expression")
        if ch == "-":
            self.pos += 1
            return ("neg", self.factor())
        if ch == "(":
            self.pos += 1
            node = self.expr()
            self.expect(")")
            return node
        if ch.isdigit() or ch == ".":
            return self.number()
        if ch.isalpha():
            return self.identifier()
        self.error(f"unexpected character {ch!r}")

    def number(self) -> tuple:
        start = self.pos
        src = self.src
        while self.pos < len(src) and (src[self.pos].isdigit() or src[self.pos] == "."):
            self.pos += 1
        if self.pos < len(src) and src[self.pos] in "eE":
            mark = self.pos
            self.pos += 1
            if self.pos < len(src) and src[self.pos] in "+-":
                self.pos += 1
            if self.pos < len(src) and src[self.pos].isdigit():
                while self.pos < len(src) and src[self.pos].isdigit():
                    self.pos += 1
            else:
                self.pos = mark  # not an exponent, leave it for the caller
        text = src[start:self.pos]
        try:
            return ("num", float(text))
        except ValueError:
            self.pos = start
            self.error(f"malformed number {text!r}")

    def identifier(self) -> tuple:
        start = self.pos
        src = self.src
        while self.pos < len(src) and src[self.pos].isalnum():
            self.pos += 1
        name = src[start:self.pos]
        if name == "t":
            return ("t",)
        if name in _FUNCTIONS:
            self.expect("(")
            node = self.expr()
            self.expect(")")
            return ("call", name, node)
        self.pos = start
        self.error(f"unknown identifier {name!r}")


def parse_signal(src: str) -> SignalExpr:
    """Parse a signal expression over the variable t."""
    return SignalExpr(root=_Parser(src).parse(), source=src)
