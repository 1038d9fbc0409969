"""Minimal arithmetic expression language.

Grammar (whitespace-insensitive)::

    expr    := orexpr
    orexpr  := andexpr ('|' andexpr)*
    andexpr := cmp ('&' cmp)*
    cmp     := sum (('<' | '<=' | '>' | '>=' | '==' | '!=') sum)?
    sum     := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | 'pi' | VAR | FUNC '(' expr ')' | '(' expr ')'
    VAR     := 'x' INDEX      (x1 .. xd, 1-based)
    FUNC    := 'sin' | 'cos' | 'exp'

Comparisons and the logical operators yield 0.0/1.0 and exist for mask
predicates such as ``x1 + x2 <= 1``. Expressions compile to vectorized
callables over arrays of points with shape ``(..., d)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatchError, ExpressionSyntaxError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op><=|>=|==|!=|[-+*/^()<>&|]))"
)

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
# Not reachable from source text; appears only in derivatives of a^b.
_INTERNAL = {"log": np.log}
_COMPARE = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
    "!=": np.not_equal,
}


# AST nodes -----------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based


@dataclass(frozen=True)
class Unary:
    op: str
    arg: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    arg: object


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    stripped = text.rstrip()
    while pos < len(stripped):
        m = _TOKEN.match(stripped, pos)
        if m is None or m.end() == pos:
            bad = pos + len(stripped[pos:]) - len(stripped[pos:].lstrip())
            raise ExpressionSyntaxError(f"unexpected character {stripped[bad]!r}", text, bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(stripped)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        return ExpressionSyntaxError(message, self.text, tok[2])

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] == "end":
            raise self.error(f"expected {value!r}", tok)
        return tok

    def parse(self):
        if self.peek()[0] == "end":
            raise self.error("empty expression")
        node = self.orexpr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def orexpr(self):
        node = self.andexpr()
        while self.peek()[1] == "|":
            self.take()
            node = Binary("|", node, self.andexpr())
        return node

    def andexpr(self):
        node = self.cmp()
        while self.peek()[1] == "&":
            self.take()
            node = Binary("&", node, self.cmp())
        return node

    def cmp(self):
        node = self.sum()
        if self.peek()[0] == "op" and self.peek()[1] in _COMPARE:
            op = self.take()[1]
            node = Binary(op, node, self.sum())
        return node

    def sum(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            arg = self.unary()
            return arg if op == "+" else Unary("-", arg)
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            node = Binary("^", node, self.unary())
        return node

    def atom(self):
        tok = self.take()
        kind, value, _ = tok
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if value == "pi":
                return Num(math.pi)
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.orexpr()
                self.expect(")")
                return Call(value, arg)
            m = re.fullmatch(r"x([1-9]\d*)", value)
            if m:
                return Var(int(m.group(1)) - 1)
            raise self.error(f"unknown name {value!r}", tok)
        if value == "(":
            node = self.orexpr()
            self.expect(")")
            return node
        if kind == "end":
            raise self.error("unexpected end of expression", tok)
        raise self.error(f"unexpected token {value!r}", tok)


def parse(text: str):
    """Parse ``text`` into an AST, raising ExpressionSyntaxError on failure."""
    return _Parser(text).parse()


def max_variable(node) -> int:
    """Largest 1-based variable index referenced by ``node`` (0 if none)."""
    if isinstance(node, Var):
        return node.index + 1
    if isinstance(node, Num):
        return 0
    if isinstance(node, (Unary, Call)):
        return max_variable(node.arg)
    return max(max_variable(node.left), max_variable(node.right))


def _simplify(node):
    # Constant folding keeps symbolic derivatives small.
    if isinstance(node, Unary):
        arg = _simplify(node.arg)
        if isinstance(arg, Num):
            return Num(-arg.value)
        return Unary("-", arg)
    if isinstance(node, Call):
        return Call(node.func, _simplify(node.arg))
    if isinstance(node, Binary):
        a, b = _simplify(node.left), _simplify(node.right)
        an = a.value if isinstance(a, Num) else None
        bn = b.value if isinstance(b, Num) else None
        if an is not None and bn is not None and node.op in "+-*/^":
            if node.op == "/" and bn == 0.0:
                return Binary("/", a, b)
            return Num(float(_evaluate(Binary(node.op, a, b), np.zeros((1, 0)))[0]))
        if node.op == "+":
            if an == 0.0:
                return b
            if bn == 0.0:
                return a
        elif node.op == "-":
            if bn == 0.0:
                return a
            if an == 0.0:
                return Unary("-", b)
        elif node.op == "*":
            if an == 0.0 or bn == 0.0:
                return Num(0.0)
            if an == 1.0:
                return b
            if bn == 1.0:
                return a
        elif node.op == "/":
            if an == 0.0:
                return Num(0.0)
            if bn == 1.0:
                return a
        return Binary(node.op, a, b)
    return node


def differentiate(node, k: int):
    """Symbolic partial derivative of ``node`` with respect to ``x_{k+1}``."""
    return _simplify(_diff(node, k))


def _diff(node, k):
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.index == k else 0.0)
    if isinstance(node, Unary):
        return Unary("-", _diff(node.arg, k))
    if isinstance(node, Call):
        inner = _diff(node.arg, k)
        if node.func == "sin":
            outer = Call("cos", node.arg)
        elif node.func == "cos":
            outer = Unary("-", Call("sin", node.arg))
        elif node.func == "log":
            outer = Binary("/", Num(1.0), node.arg)
        else:
            outer = node
        return Binary("*", outer, inner)
    op, a, b = node.op, node.left, node.right
    if op in "+-":
        return Binary(op, _diff(a, k), _diff(b, k))
    if op == "*":
        return Binary("+", Binary("*", _diff(a, k), b), Binary("*", a, _diff(b, k)))
    if op == "/":
        num = Binary("-", Binary("*", _diff(a, k), b), Binary("*", a, _diff(b, k)))
        return Binary("/", num, Binary("*", b, b))
    if op == "^":
        if isinstance(_simplify(b), Num):
            n = _simplify(b).value
            return Binary("*", Binary("*", Num(n), Binary("^", a, Num(n - 1.0))), _diff(a, k))
        # d(a^b) = a^b * (b' log a + b a' / a)
        inner = Binary("+", Binary("*", _diff(b, k), Call("log", a)),
                       Binary("/", Binary("*", b, _diff(a, k)), a))
        return Binary("*", node, inner)
    # Comparisons and logical operators are piecewise constant.
    return Num(0.0)


def _evaluate(node, x: np.ndarray) -> np.ndarray:
    shape = x.shape[:-1]
    if isinstance(node, Num):
        return np.full(shape, node.value)
    if isinstance(node, Var):
        if node.index >= x.shape[-1]:
            raise DimensionMismatchError(
                f"variable x{node.index + 1} used but dimension is {x.shape[-1]}"
            )
        return np.asarray(x[..., node.index], dtype=float)
    if isinstance(node, Unary):
        return -_evaluate(node.arg, x)
    if isinstance(node, Call):
        func = FUNCTIONS.get(node.func) or _INTERNAL[node.func]
        with np.errstate(divide="ignore", invalid="ignore"):
            return func(_evaluate(node.arg, x))
    a = _evaluate(node.left, x)
    b = _evaluate(node.right, x)
    op = node.op
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return a / b
        if op == "^":
            return np.power(a, b)
    if op == "&":
        return ((a != 0) & (b != 0)).astype(float)
    if op == "|":
        return ((a != 0) | (b != 0)).astype(float)
    return _COMPARE[op](a, b).astype(float)


class Expression:
    """A parsed expression that evaluates on arrays of points.

    Parameters
    ----------
    text : str
        Source text in the grammar above.
    dimension : int, optional
        If given, reject references to variables beyond ``x{dimension}``.
    """

    def __init__(self, text: str, dimension: int | None = None):
        self.text = text
        self.ast = parse(text)
        self.arity = max_variable(self.ast)
        if dimension is not None and self.arity > dimension:
            raise DimensionMismatchError(
                f"expression {text!r} uses x{self.arity} but dimension is {dimension}"
            )

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return _evaluate(self.ast, x)

    def gradient(self, dimension: int) -> list[Callable[[np.ndarray], np.ndarray]]:
        """Callables for each partial derivative."""
        parts = [differentiate(self.ast, k) for k in range(dimension)]
        return [lambda x, p=p: _evaluate(p, np.asarray(x, dtype=float)) for p in parts]

    def __repr__(self):
        return f"Expression({self.text!r})"
