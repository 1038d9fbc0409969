import math

import numpy as np
import pytest

from subctrl import (
    BUILTIN_NAMES,
    builtin_fields,
    eval_fields,
    fields_from_expressions,
    parse_field_config,
    serialize_fields,
    zero_fields,
)
from subctrl.errors import ConfigError, DimensionMismatchError, EvaluationError
from subctrl.fields import fd_jacobian, fields_at


def closed_form(name, x):
    """Reference columns written directly from the textbook definitions."""
    if name == "axis2d":
        return np.array([[1, 0], [0, 1]], float)
    if name == "axis3d-degenerate":
        return np.array([[1, 0], [0, 1], [0, 0]], float)
    if name == "heisenberg":
        return np.array([[1, 0], [0, 1], [-x[1] / 2, x[0] / 2]])
    if name == "grushin":
        return np.array([[1, 0], [0, x[0]]], float)
    if name == "unicycle":
        return np.array([[math.cos(x[2]), 0], [math.sin(x[2]), 0], [0, 1]])
    raise KeyError(name)


def test_builtin_names():
    assert set(BUILTIN_NAMES) == {"axis2d", "axis3d-degenerate", "heisenberg", "grushin", "unicycle"}


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_match_closed_form(name, rng):
    F = builtin_fields(name)
    for x in rng.uniform(-2, 2, size=(1000, F.dimension)):
        np.testing.assert_allclose(eval_fields(F, x), closed_form(name, x), atol=1e-12, rtol=0)


def test_builtin_examples():
    np.testing.assert_array_equal(eval_fields(builtin_fields("axis2d"), np.array([0.3, 0.7])),
                                  np.eye(2))
    np.testing.assert_array_equal(
        eval_fields(builtin_fields("heisenberg"), np.array([1.0, 2.0, 0.0])),
        [[1, 0], [0, 1], [-1, 0.5]],
    )
    g = eval_fields(builtin_fields("grushin"), np.array([0.0, 0.5]))
    np.testing.assert_array_equal(g[:, 1], [0, 0])
    np.testing.assert_array_equal(eval_fields(builtin_fields("heisenberg"), np.zeros(3)),
                                  [[1, 0], [0, 1], [0, 0]])
    u = eval_fields(builtin_fields("unicycle"), np.array([0, 0, math.pi / 2]))
    np.testing.assert_allclose(u, [[0, 0], [1, 0], [0, 1]], atol=1e-12)


def test_unknown_builtin_lists_options():
    with pytest.raises(ConfigError, match="heisenberg"):
        builtin_fields("nope")


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_analytic_jacobian_matches_finite_differences(name, rng):
    F = builtin_fields(name)
    pts = rng.uniform(-1, 1, size=(100, F.dimension))
    for i in range(F.count):
        J = F.jacobian(i, pts)
        fd = fd_jacobian(F, i, pts)
        scale = np.maximum(np.abs(J), 1.0)
        assert np.max(np.abs(J - fd) / scale) <= 1e-6


def test_field_count_bounds():
    with pytest.raises(ConfigError):
        fields_from_expressions([["1", "0", "0"]] * 3, dimension=2)
    with pytest.raises(ConfigError):
        fields_from_expressions([], dimension=2)
    with pytest.raises(ConfigError):
        fields_from_expressions([["1"]], dimension=2)


def test_non_finite_value_is_reported():
    F = fields_from_expressions([["1/x1", "0"]], dimension=2)
    with pytest.raises(EvaluationError) as info:
        eval_fields(F, np.array([0.0, 0.2]))
    assert info.value.field == 0
    np.testing.assert_array_equal(info.value.point, [0.0, 0.2])
    with pytest.raises(EvaluationError):
        fields_at(F, np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ConfigError):
        eval_fields(F, np.array([np.nan, 0.0]))


def test_parse_grushin_matches_builtin(rng):
    doc = 'dimension = 2\nfields = [["1", "0"], ["0", "x1"]]\n'
    F = parse_field_config(doc)
    B = builtin_fields("grushin")
    pts = rng.uniform(-3, 3, size=(100, 2))
    assert np.max(np.abs(fields_at(F, pts) - fields_at(B, pts))) == 0.0


def test_parse_errors():
    with pytest.raises(ConfigError):
        parse_field_config("dimension = 2\ncount = 0\nfields = []\n")
    with pytest.raises(ConfigError):
        parse_field_config('dimension = 2\nfields = []\n')
    with pytest.raises(DimensionMismatchError):
        parse_field_config('dimension = 2\nfields = [["x3", "0"]]\n')
    with pytest.raises(ConfigError):
        parse_field_config('dimension = 2\ncount = 2\nfields = [["1", "0"]]\n')
    with pytest.raises(ConfigError):
        parse_field_config("dimension = \n")


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_serialization_round_trip(name, rng):
    F = builtin_fields(name)
    G = parse_field_config(serialize_fields(F))
    assert G.count == F.count and G.dimension == F.dimension
    pts = rng.uniform(-2, 2, size=(200, F.dimension))
    np.testing.assert_allclose(fields_at(G, pts), fields_at(F, pts), atol=1e-15, rtol=0)
    for i in range(F.count):
        np.testing.assert_allclose(G.jacobian(i, pts), F.jacobian(i, pts), atol=1e-15)


def test_zero_fields():
    F = zero_fields(3, 1)
    assert F.count == 1
    np.testing.assert_array_equal(eval_fields(F, np.ones(3)), np.zeros((3, 1)))
