"""Expression trees, prefix tokens, evaluation and size metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .encoding import (
    BINARY_OPS,
    BOS,
    EOS,
    EXPONENT_MAX,
    EXPONENT_MIN,
    MANTISSA_MAX,
    PAD,
    PLACEHOLDER,
    SIGN_TOKENS,
    UNARY_OPS,
    NumericTokenTriple,
    detokenize_float,
    tokenize_float,
)
from .errors import DomainError, PrefixSyntaxError

TAN_POLE_EPS = 1e-12
DIV_EPS = 1e-300

_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


@dataclass(frozen=True)
class Expr:
    """One node of an expression tree.

    ``op`` is a binary/unary operator name, ``"var"`` (``value`` = index),
    ``"const"`` (``value`` = the literal) or ``"c"`` (an unfitted constant).
    """

    op: str
    children: tuple["Expr", ...] = ()
    value: float | int | None = None

    def __post_init__(self):
        arity = len(self.children)
        if self.op in BINARY_OPS:
            ok = arity == 2
        elif self.op in UNARY_OPS:
            ok = arity == 1
        elif self.op in ("var", "const", PLACEHOLDER):
            ok = arity == 0
        else:
            raise ValueError(f"unknown operator {self.op!r}")
        if not ok:
            raise ValueError(f"{self.op!r} node with {arity} children")

    def __str__(self) -> str:
        return to_text(self)

    def __add__(self, other):
        return Expr("add", (self, _lift(other)))

    def __radd__(self, other):
        return Expr("add", (_lift(other), self))

    def __sub__(self, other):
        return Expr("sub", (self, _lift(other)))

    def __rsub__(self, other):
        return Expr("sub", (_lift(other), self))

    def __mul__(self, other):
        return Expr("mul", (self, _lift(other)))

    def __rmul__(self, other):
        return Expr("mul", (_lift(other), self))

    def __truediv__(self, other):
        return Expr("div", (self, _lift(other)))

    def __rtruediv__(self, other):
        return Expr("div", (_lift(other), self))

    @property
    def is_leaf(self) -> bool:
        return not self.children


def var(i: int) -> Expr:
    return Expr("var", value=int(i))


def const(v: float) -> Expr:
    return Expr("const", value=float(v))


def placeholder() -> Expr:
    return Expr(PLACEHOLDER)


def unary(op: str, a: Expr) -> Expr:
    return Expr(op, (a,))


def log(a):
    return Expr("log", (_lift(a),))


def exp(a):
    return Expr("exp", (_lift(a),))


def sin(a):
    return Expr("sin", (_lift(a),))


def cos(a):
    return Expr("cos", (_lift(a),))


def tan(a):
    return Expr("tan", (_lift(a),))


def _lift(v) -> Expr:
    if isinstance(v, Expr):
        return v
    return const(v)


def walk(expr: Expr) -> Iterator[Expr]:
    """Nodes in prefix order."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def variables(expr: Expr) -> set[int]:
    return {n.value for n in walk(expr) if n.op == "var"}


def constants(expr: Expr) -> list[float]:
    return [n.value for n in walk(expr) if n.op == "const"]


def n_placeholders(expr: Expr) -> int:
    return sum(1 for n in walk(expr) if n.op == PLACEHOLDER)


def operators(expr: Expr) -> set[str]:
    return {n.op for n in walk(expr) if n.children}


def complexity(expr: Expr) -> int:
    """Operator, variable and constant count; a constant is one token."""
    return sum(1 for _ in walk(expr))


def canonicalize_constants(expr: Expr) -> Expr:
    if expr.op == "const":
        return placeholder()
    if not expr.children:
        return expr
    return Expr(expr.op, tuple(canonicalize_constants(c) for c in expr.children))


def with_constants(skeleton: Expr, values: Sequence[float]) -> Expr:
    """Fill placeholders, in prefix order, with literal constants."""
    it = iter(values)

    def fill(node: Expr) -> Expr:
        if node.op == PLACEHOLDER:
            return const(next(it))
        if not node.children:
            return node
        return Expr(node.op, tuple(fill(c) for c in node.children))

    out = fill(skeleton)
    if next(it, None) is not None:
        raise ValueError("more constant values than placeholders")
    return out


# -- prefix tokens ---------------------------------------------------------


def to_prefix(expr: Expr) -> list[str]:
    tokens = [BOS]
    for node in walk(expr):
        if node.op == "var":
            tokens.append(f"x{node.value}")
        elif node.op == "const":
            tokens.extend(tokenize_float(node.value).tokens())
        else:
            tokens.append(node.op)
    tokens.append(EOS)
    return tokens


def _parse_int_token(tok: str, lo: int, hi: int) -> int | None:
    if not tok.isdigit():
        return None
    v = int(tok)
    return v if lo <= v <= hi else None


def from_prefix(tokens: Sequence[str]) -> Expr:
    """Parse ``BOS <prefix expression> EOS [PAD ...]`` into an expression.

    Any numeric triple is accepted (the mantissa need not be normalized).
    """
    tokens = list(tokens)
    if not tokens or tokens[0] != BOS:
        raise PrefixSyntaxError("sequence must start with BOS")
    pos = 1
    n = len(tokens)

    def take() -> str:
        nonlocal pos
        if pos >= n:
            raise PrefixSyntaxError("sequence ended inside an expression")
        tok = tokens[pos]
        pos += 1
        return tok

    def parse() -> Expr:
        tok = take()
        if tok in BINARY_OPS:
            a = parse()
            b = parse()
            return Expr(tok, (a, b))
        if tok in UNARY_OPS:
            return Expr(tok, (parse(),))
        if tok in SIGN_TOKENS:
            mant = _parse_int_token(take(), 0, MANTISSA_MAX)
            if mant is None:
                raise PrefixSyntaxError(f"sign token not followed by a mantissa at {pos - 1}")
            etok = take()
            exponent = None
            if etok.startswith("E"):
                try:
                    exponent = int(etok[1:])
                except ValueError:
                    exponent = None
            if exponent is None or not EXPONENT_MIN <= exponent <= EXPONENT_MAX:
                raise PrefixSyntaxError(f"mantissa not followed by an exponent at {pos - 1}")
            return const(detokenize_float(NumericTokenTriple(tok, mant, exponent)))
        if tok == PLACEHOLDER:
            return placeholder()
        if len(tok) >= 2 and tok[0] == "x" and tok[1:].isdigit():
            return var(int(tok[1:]))
        if tok == EOS:
            raise PrefixSyntaxError(f"arity underflow: EOS at position {pos - 1}")
        raise PrefixSyntaxError(f"unexpected token {tok!r} at position {pos - 1}")

    expr = parse()
    if pos >= n:
        raise PrefixSyntaxError("missing EOS")
    if tokens[pos] != EOS:
        raise PrefixSyntaxError(f"arity overflow: {tokens[pos]!r} after a complete expression")
    if any(t != PAD for t in tokens[pos + 1 :]):
        raise PrefixSyntaxError("only PAD may follow EOS")
    return expr


def parse_prefix(text: str) -> Expr:
    """Parse whitespace-separated prefix tokens, e.g. ``"add x0 mul c x1"``."""
    body = [t for t in text.split() if t not in (BOS, EOS)]
    return from_prefix([BOS, *body, EOS])


def prefix_text(expr: Expr) -> str:
    return " ".join(to_prefix(expr)[1:-1])


def to_text(expr: Expr) -> str:
    """Fully parenthesized infix text with shortest round-trip constants."""
    if expr.op == "var":
        return f"x{expr.value}"
    if expr.op == "const":
        return repr(float(expr.value))
    if expr.op == PLACEHOLDER:
        return PLACEHOLDER
    if expr.op in UNARY_OPS:
        return f"{expr.op}({to_text(expr.children[0])})"
    a, b = expr.children
    return f"({to_text(a)} {_INFIX[expr.op]} {to_text(b)})"


# -- evaluation ------------------------------------------------------------


def evaluate_masked(expr: Expr, X, consts: Sequence[float] | None = None):
    """Evaluate on every row of ``X``; returns ``(values, ok)``.

    ``ok[i]`` is False where any node left its domain for row ``i``; the
    corresponding ``values`` entries are meaningless.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    n_rows = X.shape[0]
    bad = np.zeros(n_rows, dtype=bool)
    it = iter(consts) if consts is not None else None

    def rec(node: Expr) -> np.ndarray:
        op = node.op
        if op == "var":
            if node.value >= X.shape[1]:
                raise IndexError(f"x{node.value} used with {X.shape[1]} input columns")
            return X[:, node.value]
        if op == "const":
            return np.full(n_rows, node.value)
        if op == PLACEHOLDER:
            if it is None:
                raise ValueError("placeholder constant without a value")
            try:
                return np.full(n_rows, float(next(it)))
            except StopIteration:
                raise ValueError("not enough constant values for placeholders") from None
        if op in UNARY_OPS:
            a = rec(node.children[0])
            if op == "log":
                bad[a <= 0] = True
                out = np.log(np.where(a > 0, a, 1.0))
            elif op == "exp":
                out = np.exp(a)
            elif op == "sin":
                out = np.sin(a)
            elif op == "cos":
                out = np.cos(a)
            else:
                c = np.cos(a)
                pole = np.abs(c) < TAN_POLE_EPS
                bad[pole] = True
                out = np.tan(a)
        else:
            a = rec(node.children[0])
            b = rec(node.children[1])
            if op == "add":
                out = a + b
            elif op == "sub":
                out = a - b
            elif op == "mul":
                out = a * b
            else:
                tiny = np.abs(b) < DIV_EPS
                bad[tiny] = True
                out = a / np.where(tiny, 1.0, b)
        bad[~np.isfinite(out)] = True
        return out

    with np.errstate(all="ignore"):
        values = rec(expr)
    if it is not None and next(it, None) is not None:
        raise ValueError("more constant values than placeholders")
    return values, ~bad


def evaluate(expr: Expr, X, consts: Sequence[float] | None = None) -> np.ndarray:
    """Evaluate on every row of ``X``; DomainError if any row is invalid."""
    values, ok = evaluate_masked(expr, X, consts)
    if not ok.all():
        i = int(np.argmin(ok))
        raise DomainError(f"{to_text(expr)} is undefined at row {i}")
    return values


def eval_expr(expr: Expr, x, consts: Sequence[float] | None = None) -> float:
    """Scalar evaluation at a single input vector."""
    return float(evaluate(expr, np.asarray(x, dtype=np.float64)[None, :], consts)[0])


# -- sequence metrics ------------------------------------------------------


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance between two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, 1):
        cur = [i]
        for j, tb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != tb)))
        prev = cur
    return prev[-1]


def strip_special(tokens: Sequence[str]) -> list[str]:
    """Content tokens only: drop BOS, stop at the first EOS, drop PAD."""
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t in (BOS, PAD):
            continue
        out.append(t)
    return out
