import math

import pytest
from hypothesis import given, settings, strategies as st

from eqcausal.expr import (
    BinOp, Call, Const, DomainError, ExprSyntaxError, Neg, Param, UnboundNameError,
    UndeclaredIdentifierError, Var, affine_decompose, eval_expr, parse_expr, simplify,
    to_python, to_string, variables,
)

VARS = ("x", "y")
PARAMS = ("a",)


def P(text):
    return parse_expr(text, PARAMS, VARS)


# ---------------------------------------------------------------------------
# parsing


def test_precedence_and_associativity():
    assert P("x + y * 2") == BinOp("+", Var("x"), BinOp("*", Var("y"), Const(2.0)))
    assert P("x - y - 1") == BinOp("-", BinOp("-", Var("x"), Var("y")), Const(1.0))
    assert P("x ^ y ^ 2") == BinOp("^", Var("x"), BinOp("^", Var("y"), Const(2.0)))
    assert P("-x ^ 2") == Neg(BinOp("^", Var("x"), Const(2.0)))


def test_negative_literal_versus_negation():
    assert P("-2.5") == Const(-2.5)
    assert P("-2^2") == Neg(BinOp("^", Const(2.0), Const(2.0)))
    assert P("-(2)") == Neg(Const(2.0))


def test_calls_and_params():
    assert P("exp(a * x)") == Call("exp", BinOp("*", Param("a"), Var("x")))


def test_undeclared_identifier_reports_location():
    with pytest.raises(UndeclaredIdentifierError) as info:
        parse_expr("x + Y", PARAMS, VARS, line=3, column=10)
    assert info.value.line == 3
    assert info.value.column == 14


@pytest.mark.parametrize("bad", ["x +", "(x", "x y", "2 $ x", "sin x", ""])
def test_syntax_errors(bad):
    with pytest.raises(ExprSyntaxError):
        P(bad)


# ---------------------------------------------------------------------------
# evaluation


def test_lv_rhs_vanishes_at_interior_equilibrium():
    e = parse_expr("X1 * (t11 - t12 * X2)", ("t11", "t12"), ("X1", "X2"))
    assert eval_expr(e, {"t11": 1.0, "t12": 1.0}, {"X1": 1.0, "X2": 1.0}) == 0.0


def test_constant_evaluates_everywhere():
    assert eval_expr(P("5"), {}, {"x": 123.0}) == 5.0


@pytest.mark.parametrize("text,state", [
    ("x / y", {"x": 1.0, "y": 0.0}),
    ("log(x)", {"x": 0.0, "y": 0.0}),
    ("log(x)", {"x": -1.0, "y": 0.0}),
    ("sqrt(x)", {"x": -1.0, "y": 0.0}),
    ("x ^ 0.5", {"x": -4.0, "y": 0.0}),
    ("x ^ -1", {"x": 0.0, "y": 0.0}),
])
def test_domain_errors(text, state):
    with pytest.raises(DomainError):
        eval_expr(P(text), {"a": 1.0}, state)


def test_unbound_name():
    with pytest.raises(UnboundNameError):
        eval_expr(P("x + a"), {}, {"x": 1.0})


def test_generated_python_matches_evaluator():
    e = P("a * x ^ 2 - sin(y) / (1 + abs(x))")
    src = to_python(e, {"x": 0, "y": 1}, {"a": 0})
    assert "x[0]" in src and "p[0]" in src
    assert variables(e) == {"x", "y"}


# ---------------------------------------------------------------------------
# affine decomposition and simplification


def test_affine_decompose_linear_and_nonlinear():
    coeff, offset = affine_decompose(P("a * x - 3 * y + 2"), ["x"])
    assert eval_expr(coeff["x"], {"a": 4.0}, {}) == 4.0
    assert eval_expr(offset, {"a": 4.0}, {"y": 1.0}) == -1.0
    assert affine_decompose(P("x * x"), ["x"]) is None
    assert affine_decompose(P("sin(x)"), ["x"]) is None
    # coefficients may depend on the other variables
    coeff, _ = affine_decompose(P("x * (1 - y)"), ["x"])
    assert variables(coeff["x"]) == {"y"}


def test_simplify_folds_zeros():
    assert simplify(P("0 * x + 0 / a + 1 * y")) == Var("y")
    assert simplify(P("-(0)")) == Const(0.0)
    assert simplify(P("2 * 3 + x")) == BinOp("+", Const(6.0), Var("x"))


# ---------------------------------------------------------------------------
# properties

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
leaves = st.one_of(finite.map(Const), st.sampled_from([Var("x"), Var("y"), Param("a")]))


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda t: BinOp(*t)),
        st.tuples(st.sampled_from(["sin", "exp", "abs"]), children).map(lambda t: Call(*t)),
    )


exprs = st.recursive(leaves, _extend, max_leaves=12)


@settings(max_examples=300, deadline=None)
@given(exprs)
def test_print_parse_round_trip(e):
    assert P(to_string(e)) == e


@settings(max_examples=200, deadline=None)
@given(exprs, finite, finite)
def test_simplify_preserves_value(e, x, y):
    state, params = {"x": x, "y": y}, {"a": 1.5}
    try:
        before = eval_expr(e, params, state)
    except (ArithmeticError, OverflowError):
        return
    try:
        after = eval_expr(simplify(e), params, state)
    except (ArithmeticError, OverflowError):
        return
    if math.isfinite(before):
        assert after == pytest.approx(before, rel=1e-12, abs=1e-300) or math.isnan(before)
