"""CAM-weight expression language: AST, canonical text syntax, evaluation.

Canonical syntax::

    expr     := guard | sum
    guard    := "guard" "{" INT ":" sum (";" INT ":" sum)* "}"
    sum      := addend ("+" addend)*
    addend   := "2" "*" product | product          # "2*a + b" is the doubled form
    product  := atom ("*" atom)*
    atom     := terminal | "ReLU" "(" sum ")" | "(" sum ")"
    terminal := Grads | top5 | top10 | top20 | top50 | CICScores | AblScores

``2*a + b`` denotes the single node TwoPlus(a, b) = 2*a + b element-wise; a
doubled addend pairs with the addend immediately to its right (recursively),
and plain ``+`` chains associate to the left. Whitespace is insignificant.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from sycam.errors import EvalError, ExprSyntaxError
from sycam.tensor_io import ImageRecord


class TerminalKind(Enum):
    GRADS = "Grads"
    TOP5 = "top5"
    TOP10 = "top10"
    TOP20 = "top20"
    TOP50 = "top50"
    CIC = "CICScores"
    ABL = "AblScores"


TOP_N = {
    TerminalKind.TOP5: 5,
    TerminalKind.TOP10: 10,
    TerminalKind.TOP20: 20,
    TerminalKind.TOP50: 50,
}


class Expr:
    """Immutable expression node; concrete variants below."""

    __slots__ = ()


@dataclass(frozen=True)
class Terminal(Expr):
    kind: TerminalKind


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class TwoPlus(Expr):
    """2 * left + right, element-wise."""

    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Relu(Expr):
    arg: Expr


@dataclass(frozen=True)
class Guard(Expr):
    """Class-dispatched expression; root-only. Branch taken is the one whose
    class index equals the argmax of the record's class scores."""

    branches: tuple[tuple[int, Expr], ...]


def top_n(values: np.ndarray, n: int) -> np.ndarray:
    """Keep the n largest entries (ties broken by lowest index), zero the rest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    if n >= v.shape[0]:
        return v.copy()
    order = np.argsort(-v, kind="stable")
    out = np.zeros_like(v)
    keep = order[:n]
    out[keep] = v[keep]
    return out


def eval_weights(e: Expr, rec: ImageRecord) -> np.ndarray:
    """Evaluate an expression to a K-length float64 weight vector."""
    if isinstance(e, Terminal):
        if e.kind is TerminalKind.GRADS:
            return np.asarray(rec.grads, dtype=np.float64)
        if e.kind in TOP_N:
            return top_n(rec.grads, TOP_N[e.kind])
        if e.kind is TerminalKind.CIC:
            return np.asarray(rec.cic_scores, dtype=np.float64)
        return np.asarray(rec.abl_scores, dtype=np.float64)
    if isinstance(e, Add):
        return eval_weights(e.left, rec) + eval_weights(e.right, rec)
    if isinstance(e, TwoPlus):
        return 2.0 * eval_weights(e.left, rec) + eval_weights(e.right, rec)
    if isinstance(e, Mul):
        return eval_weights(e.left, rec) * eval_weights(e.right, rec)
    if isinstance(e, Relu):
        return np.maximum(eval_weights(e.arg, rec), 0.0)
    if isinstance(e, Guard):
        target = rec.predicted_class
        for idx, branch in e.branches:
            if idx == target:
                return eval_weights(branch, rec)
        raise EvalError(f"guard has no branch for predicted class {target}")
    raise EvalError(f"unknown expression node {type(e).__name__}")


def expr_size(e: Expr) -> int:
    """Number of AST nodes (a Guard counts as one node plus its branches)."""
    if isinstance(e, Terminal):
        return 1
    if isinstance(e, (Add, TwoPlus, Mul)):
        return 1 + expr_size(e.left) + expr_size(e.right)
    if isinstance(e, Relu):
        return 1 + expr_size(e.arg)
    if isinstance(e, Guard):
        return 1 + sum(expr_size(b) for _, b in e.branches)
    raise EvalError(f"unknown expression node {type(e).__name__}")


def mentions(e: Expr, kind: TerminalKind) -> bool:
    if isinstance(e, Terminal):
        return e.kind is kind
    if isinstance(e, (Add, TwoPlus, Mul)):
        return mentions(e.left, kind) or mentions(e.right, kind)
    if isinstance(e, Relu):
        return mentions(e.arg, kind)
    if isinstance(e, Guard):
        return any(mentions(b, kind) for _, b in e.branches)
    return False


# --- printer ------------------------------------------------------------------

_TERMINAL_NAMES = {k.value: k for k in TerminalKind}


def print_expr(e: Expr) -> str:
    if isinstance(e, Guard):
        body = "; ".join(f"{idx}: {_print_sum(b)}" for idx, b in e.branches)
        return "guard{" + body + "}"
    return _print_sum(e)


def _print_sum(e: Expr) -> str:
    if isinstance(e, Add):
        # Right child rendered as an addend: a nested Add needs parens to keep
        # left association; a TwoPlus re-parses identically without them.
        left = _print_sum(e.left)
        right = f"({_print_sum(e.right)})" if isinstance(e.right, Add) else _print_sum(e.right)
        return f"{left} + {right}"
    if isinstance(e, TwoPlus):
        left = _print_product(e.left)
        right = f"({_print_sum(e.right)})" if isinstance(e.right, Add) else _print_sum(e.right)
        return f"2*{left} + {right}"
    return _print_product(e)


def _print_product(e: Expr) -> str:
    if isinstance(e, Mul):
        left = _print_product(e.left)
        right = _print_atom(e.right)
        return f"{left}*{right}"
    return _print_atom(e)


def _print_atom(e: Expr) -> str:
    if isinstance(e, Terminal):
        return e.kind.value
    if isinstance(e, Relu):
        return f"ReLU({_print_sum(e.arg)})"
    return f"({_print_sum(e)})"


# --- parser -------------------------------------------------------------------


@dataclass
class _Token:
    kind: str  # "name" | "int" | "punct" | "eof"
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("name", text[i:j], i))
            i = j
        elif c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            name = text[i:j]
            # topN terminals start with a letter, so a bare digit run is an int.
            tokens.append(_Token("int", name, i))
            i = j
        elif c in "+*(){}:;":
            tokens.append(_Token("punct", c, i))
            i += 1
        else:
            raise ExprSyntaxError(f"unexpected character {c!r}", i)
    tokens.append(_Token("eof", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.next()
        if tok.text != text:
            raise ExprSyntaxError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def parse(self) -> Expr:
        if self.peek().text == "guard":
            e = self.parse_guard()
        else:
            e = self.parse_sum()
        tok = self.peek()
        if tok.kind != "eof":
            raise ExprSyntaxError(f"unexpected trailing input {tok.text!r}", tok.pos)
        return e

    def parse_guard(self) -> Expr:
        self.expect("guard")
        self.expect("{")
        branches: list[tuple[int, Expr]] = []
        seen: set[int] = set()
        while True:
            tok = self.next()
            if tok.kind != "int":
                raise ExprSyntaxError("expected class index in guard", tok.pos)
            idx = int(tok.text)
            if idx in seen:
                raise ExprSyntaxError(f"duplicate guard branch for class {idx}", tok.pos)
            seen.add(idx)
            self.expect(":")
            branches.append((idx, self.parse_sum()))
            tok = self.next()
            if tok.text == "}":
                break
            if tok.text != ";":
                raise ExprSyntaxError(f"expected ';' or '}}', found {tok.text!r}", tok.pos)
        return Guard(tuple(branches))

    def parse_sum(self) -> Expr:
        acc = self.parse_addend_unit()
        while self.peek().text == "+":
            self.next()
            acc = Add(acc, self.parse_addend_unit())
        return acc

    def parse_addend_unit(self) -> Expr:
        # A doubled addend pairs with the next unit: 2*a + 2*b + c -> TwoPlus(a, TwoPlus(b, c)).
        tok = self.peek()
        if tok.kind == "int":
            if tok.text != "2":
                raise ExprSyntaxError("only the doubled form '2*expr + expr' is allowed", tok.pos)
            self.next()
            self.expect("*")
            left = self.parse_product()
            plus = self.next()
            if plus.text != "+":
                raise ExprSyntaxError("'2*expr' must be followed by '+ expr'", plus.pos)
            return TwoPlus(left, self.parse_addend_unit())
        return self.parse_product()

    def parse_product(self) -> Expr:
        acc = self.parse_atom()
        while self.peek().text == "*":
            self.next()
            acc = Mul(acc, self.parse_atom())
        return acc

    def parse_atom(self) -> Expr:
        tok = self.next()
        if tok.text == "(":
            e = self.parse_sum()
            self.expect(")")
            return e
        if tok.text == "ReLU":
            self.expect("(")
            e = self.parse_sum()
            self.expect(")")
            return Relu(e)
        if tok.kind == "name":
            kind = _TERMINAL_NAMES.get(tok.text)
            if kind is None:
                raise ExprSyntaxError(f"unknown terminal {tok.text!r}", tok.pos)
            return Terminal(kind)
        raise ExprSyntaxError(f"expected expression, found {tok.text or 'end of input'!r}", tok.pos)


def parse_expr(text: str) -> Expr:
    """Parse canonical syntax; raises ExprSyntaxError with position on failure."""
    return _Parser(text).parse()
