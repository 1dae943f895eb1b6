import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentsr.errors import DomainError, PrefixSyntaxError
from latentsr.expr import (
    Expr,
    canonicalize_constants,
    complexity,
    const,
    edit_distance,
    eval_expr,
    evaluate,
    from_prefix,
    log,
    parse_prefix,
    placeholder,
    sin,
    strip_special,
    tan,
    to_prefix,
    to_text,
    var,
    with_constants,
)
from latentsr.encoding import BINARY_OPS, UNARY_OPS, round_sig4

x0, x1, x2 = var(0), var(1), var(2)


def tree_oracle(e, x, consts):
    """Independent scalar tree walk over the math module."""
    it = iter(consts)

    def rec(n):
        if n.op == "var":
            return x[n.value]
        if n.op == "const":
            return n.value
        if n.op == "c":
            return next(it)
        args = [rec(c) for c in n.children]
        return {
            "add": lambda a, b: a + b,
            "sub": lambda a, b: a - b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / b,
            "log": math.log,
            "exp": math.exp,
            "sin": math.sin,
            "cos": math.cos,
            "tan": math.tan,
        }[n.op](*args)

    return rec(e)


def random_tree(rng, depth=0, n_vars=3):
    r = rng.random()
    if depth >= 4 or r < 0.3:
        if rng.random() < 0.7:
            return var(rng.randrange(n_vars))
        return const(round_sig4(rng.choice([-1, 1]) * 10 ** rng.uniform(-1, 1)))
    if r < 0.55:
        return Expr(rng.choice(UNARY_OPS), (random_tree(rng, depth + 1, n_vars),))
    return Expr(
        rng.choice(BINARY_OPS),
        (random_tree(rng, depth + 1, n_vars), random_tree(rng, depth + 1, n_vars)),
    )


class TestEval:
    def test_sum(self):
        assert eval_expr(x0 + x1, [2, 3]) == 5

    def test_log_domain(self):
        with pytest.raises(DomainError):
            eval_expr(log(x0), [-1])

    def test_placeholder_constant(self):
        e = sin(x0) * x1 + placeholder()
        got = eval_expr(e, [math.pi / 2, 2], consts=[0.5])
        assert got == 2.5
        assert got == tree_oracle(e, [math.pi / 2, 2], [0.5])

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            eval_expr(x0 / x1, [1.0, 0.0])

    def test_tan_pole(self):
        with pytest.raises(DomainError):
            eval_expr(tan(x0), [math.pi / 2])

    def test_overflow(self):
        from latentsr.expr import exp

        with pytest.raises(DomainError):
            eval_expr(exp(exp(x0)), [10.0])

    def test_matches_oracle_on_random_trees(self):
        rng = random.Random(0)
        checked = 0
        for _ in range(300):
            e = random_tree(rng)
            x = [rng.uniform(-2, 2) for _ in range(3)]
            try:
                want = tree_oracle(e, x, [])
            except (ValueError, ZeroDivisionError, OverflowError):
                continue
            if not math.isfinite(want) or abs(want) > 1e12:
                continue
            try:
                got = eval_expr(e, x)
            except DomainError:
                continue
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)
            checked += 1
        assert checked > 150

    def test_deterministic(self):
        e = log(x0) * x1
        X = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
        for row in X:
            outcomes = []
            for _ in range(2):
                try:
                    outcomes.append(eval_expr(e, row))
                except DomainError:
                    outcomes.append("err")
            assert outcomes[0] == outcomes[1]

    def test_vectorized_raises_on_any_bad_row(self):
        with pytest.raises(DomainError):
            evaluate(log(x0), np.array([[1.0], [-1.0]]))


class TestPrefix:
    def test_sum(self):
        assert to_prefix(x0 + x1) == ["BOS", "add", "x0", "x1", "EOS"]

    def test_unary(self):
        assert to_prefix(sin(x0)) == ["BOS", "sin", "x0", "EOS"]

    def test_constant_triple(self):
        assert to_prefix(x0 + 0.7895) == ["BOS", "add", "x0", "+", "7895", "E-4", "EOS"]

    def test_parse_sum(self):
        assert from_prefix(["BOS", "add", "x0", "x1", "EOS"]) == x0 + x1

    def test_arity_underflow(self):
        with pytest.raises(PrefixSyntaxError):
            from_prefix(["BOS", "add", "x0", "EOS"])

    def test_parse_constant(self):
        e = from_prefix(["BOS", "mul", "sin", "x0", "+", "2000", "E-3", "EOS"])
        assert e == sin(x0) * 2.0

    @pytest.mark.parametrize(
        "tokens",
        [
            ["BOS", "x0", "x1", "EOS"],
            ["BOS", "add", "x0", "x1"],
            ["BOS", "add", "x0", "+", "12", "EOS"],
            ["BOS", "+", "E-3", "x0", "EOS"],
            ["add", "x0", "x1", "EOS"],
            ["BOS", "add", "x0", "PAD", "x1", "EOS"],
            ["BOS", "x0", "EOS", "x1"],
            ["BOS", "EOS"],
            [],
        ],
    )
    def test_rejects(self, tokens):
        with pytest.raises(PrefixSyntaxError):
            from_prefix(tokens)

    def test_trailing_pad_ok(self):
        assert from_prefix(["BOS", "x0", "EOS", "PAD", "PAD"]) == x0

    def test_round_trip_random(self):
        rng = random.Random(3)
        for _ in range(500):
            e = random_tree(rng)
            assert from_prefix(to_prefix(e)) == e

    def test_parse_prefix_text(self):
        assert parse_prefix("add x0 mul c x1") == x0 + placeholder() * x1

    def test_text(self):
        assert to_text(sin(x0) * 0.5 + x1) == "((sin(x0) * 0.5) + x1)"
        assert to_text(canonicalize_constants(2.0 * x0)) == "(c * x0)"


class TestComplexity:
    def test_leaf(self):
        assert complexity(x0) == 1

    def test_sum(self):
        assert complexity(x0 + x1) == 3

    def test_constant_counts_once(self):
        e = sin(x0) * placeholder() + x1
        assert complexity(e) == 6
        assert complexity(sin(x0) * 0.5 + x1) == 6

    def test_matches_prefix_token_count(self):
        rng = random.Random(5)
        for _ in range(200):
            e = random_tree(rng)
            body = strip_special(to_prefix(e))
            n_const = sum(1 for t in body if t in ("+", "-"))
            assert complexity(e) == len(body) - 2 * n_const


class TestCanonicalize:
    def test_constant(self):
        assert canonicalize_constants(0.7895 * x0) == placeholder() * x0

    def test_no_constants(self):
        assert canonicalize_constants(x0 + x1) == x0 + x1

    def test_all_leaves(self):
        assert canonicalize_constants(2 * x0 + 3) == placeholder() * x0 + placeholder()

    def test_with_constants_inverse(self):
        e = 2.0 * x0 + 3.0
        assert with_constants(canonicalize_constants(e), [2.0, 3.0]) == e


def naive_lev(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        naive_lev(a[1:], b) + 1,
        naive_lev(a, b[1:]) + 1,
        naive_lev(a[1:], b[1:]) + (a[0] != b[0]),
    )


tokens_st = st.lists(st.sampled_from(["add", "mul", "x0", "x1", "x2", "sin"]), max_size=12)


class TestEditDistance:
    def test_identity(self):
        s = ["add", "x0", "x1"]
        assert edit_distance(s, s) == 0

    def test_substitution(self):
        assert edit_distance(["add", "x0", "x1"], ["add", "x0", "x2"]) == 1

    def test_matches_naive_recursion(self):
        rng = random.Random(11)
        alphabet = ["add", "x0", "x1", "sin"]
        for _ in range(400):
            a = [rng.choice(alphabet) for _ in range(rng.randint(0, 6))]
            b = [rng.choice(alphabet) for _ in range(rng.randint(0, 6))]
            assert edit_distance(a, b) == naive_lev(a, b)

    @settings(max_examples=200, deadline=None)
    @given(tokens_st, tokens_st, tokens_st)
    def test_metric_axioms(self, a, b, c):
        assert edit_distance(a, b) == edit_distance(b, a)
        assert (edit_distance(a, b) == 0) == (a == b)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
