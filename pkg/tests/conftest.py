import numpy as np
import pytest

from subctrl import assemble_form_operator, build_grid, builtin_fields


@pytest.fixture(scope="session")
def unit_square_33():
    return build_grid(([0.0, 0.0], [1.0, 1.0]), [33, 33])


@pytest.fixture(scope="session")
def axis2d_33(unit_square_33):
    return assemble_form_operator(unit_square_33, builtin_fields("axis2d"))


@pytest.fixture(scope="session")
def heisenberg_9():
    G = build_grid(([-1.0] * 3, [1.0] * 3), [9, 9, 9])
    return assemble_form_operator(G, builtin_fields("heisenberg"))


@pytest.fixture(scope="session")
def degenerate_9():
    G = build_grid(([0.0] * 3, [1.0] * 3), [9, 9, 9])
    return assemble_form_operator(G, builtin_fields("axis3d-degenerate"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
