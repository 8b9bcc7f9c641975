import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fibernf import expr, kernels
from fibernf.errors import DimensionMismatchError, ExpressionSyntaxError, UnknownIdentifierError
from fibernf.hamiltonian import builtin_library

from oracles import central_difference

VARS = ["q0", "q1", "p0", "p1"]


def _leaf():
    return st.one_of(
        st.sampled_from(VARS),
        st.floats(min_value=-3, max_value=3, allow_nan=False).map(lambda v: repr(round(v, 3))),
    )


def _extend(children):
    """Expressions that stay finite on the unit box."""
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda t: f"({t[0]}) {t[1]} ({t[2]})"),
        st.tuples(children, children).map(lambda t: f"({t[0]})/(2 + cos({t[1]}))"),
        st.tuples(children, st.integers(1, 3)).map(lambda t: f"({t[0]})^{t[1]}"),
        children.map(lambda c: f"sin({c})"),
        children.map(lambda c: f"cos({c})"),
        children.map(lambda c: f"exp(0.1*sin({c}))"),
        children.map(lambda c: f"sqrt(2 + sin({c}))"),
        children.map(lambda c: f"log(3 + cos({c}))"),
        children.map(lambda c: f"-({c})"),
    )


expressions = st.recursive(_leaf(), _extend, max_leaves=8)


def _evaluate(node, x):
    prog = expr.compile_many([node], expr.phase_var_index(1))
    return kernels.evaluate(prog, np.atleast_2d(x))[:, 0]


# ---------------------------------------------------------------- parsing

def test_precedence_and_power_associativity():
    node = expr.parse("2^3^2 - 1 + 2*3/4", d=1)
    assert _evaluate(node, np.zeros(4))[0] == pytest.approx(2**9 - 1 + 1.5)


def test_unary_minus_binds_weaker_than_power():
    assert _evaluate(expr.parse("-2^2", d=1), np.zeros(4))[0] == -4.0
    assert _evaluate(expr.parse("2^-1", d=1), np.zeros(4))[0] == 0.5


def test_double_star_is_power():
    assert expr.parse("q0**2", d=1) == expr.parse("q0^2", d=1)


def test_parameters_are_bound_at_parse_time():
    node = expr.parse("eps*q1*p0", d=1, params={"eps": 0.1})
    assert expr.variables(node) == {"q1", "p0"}
    assert _evaluate(node, [0, 2.0, 3.0, 0])[0] == pytest.approx(0.6)


def test_case_sensitive_names():
    with pytest.raises(UnknownIdentifierError):
        expr.parse("Q0 + p0", d=1)


def test_syntax_error_reports_position():
    with pytest.raises(ExpressionSyntaxError) as info:
        expr.parse("p0 + * p1", d=1)
    assert info.value.position == 5
    assert "position 5" in str(info.value)


def test_unbalanced_parenthesis():
    with pytest.raises(ExpressionSyntaxError):
        expr.parse("(p0 + p1", d=1)


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifierError, match="eps"):
        expr.parse("eps*q1", d=1)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        expr.parse("p2^2", d=1)


def test_pi_constant():
    assert _evaluate(expr.parse("cos(pi)", d=1), np.zeros(4))[0] == pytest.approx(-1.0)


# ---------------------------------------------------------------- printing

@pytest.mark.parametrize("name", list(builtin_library()))
def test_round_trip_builtin(name):
    entry = builtin_library()[name]
    node = expr.parse(entry.text, d=entry.d, params=entry.params)
    text = expr.to_string(node)
    again = expr.parse(text, d=entry.d)
    assert again == node
    assert expr.to_string(again) == text


@given(expressions)
def test_round_trip_is_fixed_point(text):
    node = expr.parse(text, d=1)
    printed = expr.to_string(node)
    assert expr.parse(printed, d=1) == node


@given(expressions)
def test_printing_preserves_value(text):
    node = expr.parse(text, d=1)
    x = np.array([0.3, -0.2, 0.7, 0.1])
    a = _evaluate(node, x)[0]
    b = _evaluate(expr.parse(expr.to_string(node), d=1), x)[0]
    assert a == b or (math.isnan(a) and math.isnan(b))


def test_negative_constants_print_with_parentheses_when_needed():
    node = expr.parse("q0^(-2)", d=1)
    assert expr.parse(expr.to_string(node), d=1) == node


# ---------------------------------------------------------------- differentiation

@given(expressions, st.sampled_from(VARS))
def test_symbolic_derivative_matches_finite_differences(text, var):
    node = expr.parse(text, d=1)
    dnode = expr.diff(node, var)
    x = np.array([0.21, -0.37, 0.55, 0.13])
    i = VARS.index(var)
    exact = _evaluate(dnode, x)[0]
    approx = central_difference(lambda y: _evaluate(node, y)[0], x, i, h=1e-5)
    assert abs(exact - approx) <= 1e-6 * (1 + abs(exact))


@pytest.mark.parametrize("text,q0,expected", [
    ("sqrt(q0)", 4.0, 0.25),
    ("log(q0)", 4.0, 0.25),
    ("exp(2*q0)", 0.0, 2.0),
    ("sin(q0)", 0.0, 1.0),
    ("cos(q0)", 0.0, 0.0),
    ("1/q0", 2.0, -0.25),
])
def test_elementary_derivatives(text, q0, expected):
    x = np.array([q0, 0, 0, 0])
    assert _evaluate(expr.diff(expr.parse(text, d=1), "q0"), x)[0] == pytest.approx(expected, abs=1e-15)


def test_derivative_of_constant_is_zero():
    assert expr.diff(expr.parse("3*q1", d=1), "p0") == expr.ZERO


def test_general_power_derivative():
    node = expr.parse("q0^q1", d=1)
    x = np.array([2.0, 3.0, 0, 0])
    assert _evaluate(expr.diff(node, "q1"), x)[0] == pytest.approx(8 * math.log(2))
    assert _evaluate(expr.diff(node, "q0"), x)[0] == pytest.approx(12.0)


def test_substitute():
    node = expr.substitute(expr.parse("q0*p0", d=1), {"q0": expr.parse("2+q1", d=1)})
    assert _evaluate(node, [0, 1.0, 3.0, 0])[0] == pytest.approx(9.0)
