import itertools

import numpy as np
import pytest

from subctrl import DensityField, build_grid, interpolate, quad_weights
from subctrl.errors import ConfigError, DomainError
from subctrl.grid import grid_csv, interpolate_many, interpolation_stencil, nearest_node


def test_unit_square_3x3():
    G = build_grid(([0, 0], [1, 1]), [3, 3])
    assert G.size == 9
    np.testing.assert_array_equal(G.spacing, [0.5, 0.5])


def test_lexicographic_order():
    G = build_grid(([0, 0], [1, 2]), [3, 5])
    expected = [(i * 0.5, j * 0.5) for i in range(3) for j in range(5)]
    np.testing.assert_allclose(G.coords, expected)


def test_mask_under_diagonal():
    G = build_grid(([0, 0], [1, 1]), [5, 5], mask="x1+x2<=1")
    brute = sum(1 for i, j in itertools.product(range(5), repeat=2) if i * 0.25 + j * 0.25 <= 1)
    assert G.size == brute == 15
    assert np.all(G.coords.sum(axis=1) <= 1 + 1e-12)


@pytest.mark.parametrize(
    "box, res, mask",
    [
        (([0], [1]), [2], None),
        (([0, 0], [1, 0]), [3, 3], None),
        (([0, 0], [1, 1]), [3], None),
        (([0, 0], [1, 1]), [5, 5], "x1 > 2"),
        (([0, 0], [1, 1]), [5, 5], "(x1 < 0.1) | (x1 > 0.9)"),
        (([0, 0], [1, 1]), [5, 5], "(x1 == 0) & (x2 == 0)"),
    ],
)
def test_build_grid_errors(box, res, mask):
    with pytest.raises(ConfigError):
        build_grid(box, res, mask)


def test_trapezoid_weights():
    np.testing.assert_allclose(quad_weights(build_grid(([0], [1]), [3])), [0.25, 0.5, 0.25])
    w = quad_weights(build_grid(([0, 0], [1, 1]), [3, 3])).reshape(3, 3)
    np.testing.assert_allclose(w, [[0.0625, 0.125, 0.0625], [0.125, 0.25, 0.125],
                                   [0.0625, 0.125, 0.0625]])
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("box, res", [(([0, -1, 2], [3, 1, 2.5]), [4, 7, 5]), (([-2], [5]), [11])])
def test_weights_sum_to_volume(box, res):
    G = build_grid(box, res)
    assert G.weights.sum() == pytest.approx(G.volume, rel=1e-14)


def test_masked_weights_approximate_area():
    errs = []
    for n in (17, 33, 65):
        G = build_grid(([0, 0], [1, 1]), [n, n], mask="x1+x2<=1")
        errs.append(abs(G.weights.sum() - 0.5))
    assert errs[2] < errs[1] < errs[0] < 0.1


def test_cosine_quadrature_converges_second_order():
    # A full period of cos(2 pi x1) is integrated exactly by the trapezoid rule,
    # which is within any O(h^2) bound.
    for n in (9, 17, 33):
        G = build_grid(([0, 0], [1, 1]), [n, n])
        assert abs(G.weights @ np.cos(2 * np.pi * G.coords[:, 0])) <= 1e-14
    # A non-periodic integrand shows the generic second-order rate.
    exact = np.sin(2.5 * np.pi) / (2.5 * np.pi)
    errs = []
    for n in (9, 17, 33, 65):
        G = build_grid(([0, 0], [1, 1]), [n, n])
        errs.append(abs(G.weights @ np.cos(2.5 * np.pi * G.coords[:, 0]) - exact))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.9)


def test_interpolation_reproduces_constants_and_linears(rng):
    G = build_grid(([0, -1, 0], [1, 1, 2]), [5, 6, 4])
    pts = G.lower + rng.random((500, 3)) * (G.upper - G.lower)
    np.testing.assert_allclose(interpolate_many(G, np.full(G.size, 3.25), pts), 3.25, rtol=1e-15)
    a = np.array([0.3, -1.7, 2.2])
    lin = G.coords @ a + 0.5
    np.testing.assert_allclose(interpolate_many(G, lin, pts), pts @ a + 0.5, atol=1e-12)
    assert interpolate(G, G.coords[:, 0], [0.37, 0.0, 1.0]) == pytest.approx(0.37, abs=1e-12)


def test_interpolation_is_exact_at_nodes(rng):
    G = build_grid(([0, 0], [1, 1]), [4, 4])
    v = rng.standard_normal(G.size)
    for a in range(G.size):
        assert interpolate(G, v, G.coords[a]) == v[a]


def test_interpolation_outside_box():
    G = build_grid(([0, 0], [1, 1]), [4, 4])
    with pytest.raises(DomainError):
        interpolate(G, np.zeros(G.size), [1.1, 0.5])
    with pytest.raises(ConfigError):
        interpolate(G, np.zeros(3), [0.5, 0.5])


def test_masked_corner_uses_nearest_active_corner():
    G = build_grid(([0, 0], [1, 1]), [3, 3], mask="x1+x2<=1")
    # Cell [0.5,1]x[0.5,1] has only the (0.5,0.5) corner active.
    v = np.arange(G.size, dtype=float)
    center = G.index_map[1, 1]
    assert interpolate(G, v, [0.75, 0.75]) == pytest.approx(v[center])
    # Cell [0,0.5]x[0.5,1]: corner (0.5,1) is inactive and is replaced by
    # its axis neighbours; (0,1) is tried first (lower corner number).
    idx, wts = interpolation_stencil(G, np.array([[0.25, 0.75]]))
    assert np.all(idx >= 0)
    assert wts.sum() == pytest.approx(1.0)
    assert idx[0, 3] == G.index_map[0, 2]


def test_nearest_node_snaps_to_active():
    G = build_grid(([0, 0], [1, 1]), [5, 5], mask="x1+x2<=1")
    idx = nearest_node(G, np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert idx[1] == 0
    assert np.linalg.norm(G.coords[idx[0]] - [1, 1]) == pytest.approx(np.sqrt(0.5**2 + 0.5**2))


def test_grid_csv_columns():
    G = build_grid(([0, 0], [1, 1]), [3, 3], mask="x1<=0.5")
    lines = grid_csv(G).splitlines()
    assert lines[0] == "index,x1,x2,weight,mask"
    assert len(lines) == 10
    assert lines[-1].endswith(",0.0,0") and lines[-1].startswith("-1,")


def test_density_field_validation():
    G = build_grid(([0, 0], [2, 1]), [5, 5])
    rho = DensityField.uniform(G)
    np.testing.assert_allclose(rho.values, 0.5)
    with pytest.raises(ConfigError):
        DensityField(G, np.ones(G.size))
    neg = np.full(G.size, 0.5)
    neg[3] = -0.1
    with pytest.raises(ConfigError, match="node 3"):
        DensityField(G, neg)
    with pytest.raises(ConfigError):
        DensityField.normalized(G, np.zeros(G.size))
    r = DensityField.from_expression(G, "1 + x1")
    assert G.weights @ r.values == pytest.approx(1.0, abs=1e-14)


def test_interior_flags():
    G = build_grid(([0, 0], [1, 1]), [4, 5])
    assert G.interior.sum() == 2 * 3
    M = build_grid(([0, 0], [1, 1]), [5, 5], mask="x1+x2<=1")
    inner = M.coords[M.interior]
    assert np.all(inner.min(axis=1) > 0) and np.all(inner.sum(axis=1) < 1)
