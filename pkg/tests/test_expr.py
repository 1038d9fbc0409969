import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subctrl.errors import DimensionMismatchError, ExpressionSyntaxError
from subctrl.expr import Expression, parse


@pytest.mark.parametrize(
    "text, expected",
    [
        ("1 + 2 * 3", 7.0),
        ("(1 + 2) * 3", 9.0),
        ("2 ^ 3 ^ 2", 512.0),
        ("-2 ^ 2", -4.0),
        ("2 ^ -1", 0.5),
        ("8 / 4 / 2", 1.0),
        ("pi", math.pi),
        ("cos(pi)", -1.0),
        ("exp(0) + sin(0)", 1.0),
        ("1.5e2 - .5", 149.5),
        ("1 < 2", 1.0),
        ("2 <= 1", 0.0),
        ("(1 < 2) & (3 > 4)", 0.0),
        ("(1 < 2) | (3 > 4)", 1.0),
        ("3 == 3", 1.0),
        ("3 != 3", 0.0),
    ],
)
def test_constant_expressions(text, expected):
    assert float(Expression(text)(np.zeros(1))) == pytest.approx(expected, rel=1e-15)


def test_variables_are_one_based_and_vectorized():
    e = Expression("x1 * x2 - x3 / 2")
    pts = np.array([[1.0, 2.0, 4.0], [3.0, -1.0, 0.0]])
    np.testing.assert_array_equal(e(pts), [0.0, -3.0])
    assert e.arity == 3


def test_mask_predicate():
    e = Expression("x1 + x2 <= 1")
    np.testing.assert_array_equal(e(np.array([[0.5, 0.5], [0.6, 0.5]])), [1.0, 0.0])


@pytest.mark.parametrize("text", ["1 +", "(1", "1 2", "foo(1)", "x0", "sin 1", "#", "", "y1"])
def test_syntax_errors(text):
    with pytest.raises(ExpressionSyntaxError):
        parse(text)


def test_syntax_error_reports_position():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("1 + * 2")
    assert info.value.position == 4


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        Expression("x3", dimension=2)


@pytest.mark.parametrize(
    "text, grad",
    [
        ("x1^2 * x2", lambda x: [2 * x[0] * x[1], x[0] ** 2]),
        ("sin(x1) * cos(x2)", lambda x: [math.cos(x[0]) * math.cos(x[1]),
                                         -math.sin(x[0]) * math.sin(x[1])]),
        ("exp(x1 / x2)", lambda x: [math.exp(x[0] / x[1]) / x[1],
                                    -x[0] / x[1] ** 2 * math.exp(x[0] / x[1])]),
        ("x2 ^ x1", lambda x: [math.log(x[1]) * x[1] ** x[0], x[0] * x[1] ** (x[0] - 1)]),
    ],
)
def test_symbolic_gradient(text, grad):
    e = Expression(text)
    g = e.gradient(2)
    x = np.array([0.7, 1.3])
    np.testing.assert_allclose([gk(x) for gk in g], grad(x), rtol=1e-13)


_leaf = st.sampled_from(["x1", "x2", "1", "2.5", "pi"])


def _combine(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
            lambda t: f"({t[0]} {t[1]} {t[2]})"
        ),
        children.map(lambda c: f"sin({c})"),
        children.map(lambda c: f"cos({c})"),
    )


@settings(max_examples=60, deadline=None)
@given(st.recursive(_leaf, _combine, max_leaves=6))
def test_gradient_matches_finite_differences(text):
    e = Expression(text)
    x = np.array([0.31, -0.47])
    h = 1e-6
    for k, gk in enumerate(e.gradient(2)):
        step = np.zeros(2)
        step[k] = h
        fd = (e(x + step) - e(x - step)) / (2 * h)
        assert abs(float(gk(x)) - float(fd)) <= 1e-6 * max(1.0, abs(float(fd)))
