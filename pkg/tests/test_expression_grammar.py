import numpy as np
import pytest
from numpy.testing import assert_allclose

from packages.errors import ConfigError
from packages.expression_grammar import compile_expression


def test_quadratic_profile_expression():
    sigma = compile_expression("s*(s-3)")
    assert_allclose(sigma(np.array([0.0, 1.0, 1.5, 4.0])), [0.0, -2.0, -2.25, 4.0])


def test_glued_profile_with_where_and_comparison():
    sigma = compile_expression("where(s <= 4, s*(s-3), 4 + 5*(s-4))")
    assert_allclose(sigma(np.array([2.0, 4.0, 5.0])), [-2.0, 4.0, 9.0])


def test_two_variables_and_constants():
    u0 = compile_expression("sin(pi*x) * cos(pi*y)", ("x", "y"))
    assert u0(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(1.0)


def test_constant_expression_broadcasts_to_the_grid():
    u0 = compile_expression("2", ("x",))
    values = u0(np.linspace(0.0, 1.0, 5))
    assert values.shape == (5,)
    assert_allclose(values, 2.0)


def test_unary_minus_and_power():
    f = compile_expression("-x**2 + abs(x - 1)", ("x",))
    assert_allclose(f(np.array([0.0, 2.0])), [1.0, -3.0])


@pytest.mark.parametrize("source", [
    "s*(",
    "q + 1",
    "__import__('os')",
    "s.real",
    "max(s, key=1)",
    "[s, s]",
    "lambda: 1",
    "'text'",
])
def test_rejected_expressions(source):
    with pytest.raises(ConfigError):
        compile_expression(source)
