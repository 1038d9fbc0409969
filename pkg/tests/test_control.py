import numpy as np
import pytest

from subctrl import (
    DensityField,
    assemble_form_operator,
    build_grid,
    builtin_fields,
    continuity_residual,
    energy_bound,
    spectral_gap,
    steering_controls,
    steering_potential,
    tracking_controls,
)
from subctrl.control import (
    ControlField,
    default_floor,
    interpolate_density,
    time_derivative,
    time_grid,
)
from subctrl.errors import ConfigError, DensityBoundError, NotControllableError
from subctrl.spectral import project_mean_zero

from helpers import random_density


@pytest.fixture(scope="module")
def axis2d_64():
    G = build_grid(([0, 0], [1, 1]), [64, 64])
    return assemble_form_operator(G, builtin_fields("axis2d"))


def cosine_pair(G):
    return DensityField.uniform(G), DensityField.from_expression(G, "1 + 0.1*cos(pi*x1)")


def test_interpolate_density(unit_square_33, rng):
    G = unit_square_33
    r0, r1 = random_density(G, rng), random_density(G, rng)
    assert interpolate_density(r0, r1, 0.0) is r0
    assert interpolate_density(r0, r1, 1.0) is r1
    mid = interpolate_density(r0, r1, 0.3)
    np.testing.assert_allclose(mid.values, 0.7 * r0.values + 0.3 * r1.values)
    u = DensityField.uniform(G)
    for t in (0.2, 0.9):
        np.testing.assert_allclose(interpolate_density(u, u, t).values, u.values)
    other = DensityField.uniform(build_grid(([0, 0], [1, 1]), [5, 5]))
    with pytest.raises(ConfigError):
        interpolate_density(r0, other, 0.5)
    with pytest.raises(ConfigError):
        interpolate_density(r0, r1, 1.5)


def test_potential_of_equal_densities_is_zero(axis2d_33, unit_square_33, rng):
    r = random_density(unit_square_33, rng)
    assert np.all(steering_potential(axis2d_33, r, r) == 0)


def test_potential_cosine_oracle(axis2d_64):
    G = axis2d_64.grid
    r0, r1 = cosine_pair(G)
    f = steering_potential(axis2d_64, r0, r1, tol=1e-10)
    exact = 0.1 * np.cos(np.pi * G.coords[:, 0]) / np.pi**2
    assert np.max(np.abs(f - exact)) <= 1e-3
    assert abs(axis2d_64.mass @ f) <= 1e-12


def test_potential_refuses_degenerate(degenerate_9):
    G = degenerate_9.grid
    r0 = DensityField.uniform(G)
    r1 = DensityField.from_expression(G, "1 + 0.5*cos(pi*x3)")
    with pytest.raises(NotControllableError):
        steering_potential(degenerate_9, r0, r1)


def test_density_floor_violation_names_node(unit_square_33, axis2d_33):
    G = unit_square_33
    r0 = DensityField.uniform(G)
    low = DensityField.from_expression(G, "x1")
    with pytest.raises(DensityBoundError) as info:
        steering_potential(axis2d_33, r0, low)
    assert G.coords[info.value.node, 0] == 0.0


def test_controls_from_zero_potential(unit_square_33, axis2d_33, rng):
    G = unit_square_33
    r0, r1 = random_density(G, rng), random_density(G, rng)
    C = steering_controls(axis2d_33, np.zeros(G.size), r0, r1)
    assert C.steps == 64 and np.all(C.controls == 0)


def test_controls_with_uniform_densities(unit_square_33, axis2d_33, rng):
    G = build_grid(([0, 0], [2, 1]), [9, 9])
    D = assemble_form_operator(G, builtin_fields("grushin"))
    u = DensityField.uniform(G)
    f = rng.standard_normal(G.size)
    C = steering_controls(D, f, u, u, time_grid(8))
    for i in range(2):
        expected = G.volume * D.apply_directional(i, f)
        np.testing.assert_allclose(C.controls[:, i], np.broadcast_to(expected, (9, G.size)),
                                   rtol=1e-14)


def test_controls_vanish_at_left_wall(axis2d_64):
    G = axis2d_64.grid
    r0, r1 = cosine_pair(G)
    f = steering_potential(axis2d_64, r0, r1)
    C = steering_controls(axis2d_64, f, r0, r1)
    left = G.coords[:, 0] == 0
    assert np.max(np.abs(C.controls[0, 0, left])) <= 1e-3


def test_control_magnitude_bound(heisenberg_9, rng):
    D = heisenberg_9
    r0, r1 = random_density(D.grid, rng), random_density(D.grid, rng)
    c = default_floor(D.grid)
    f = steering_potential(D, r0, r1)
    C = steering_controls(D, f, r0, r1, c=c)
    for i in range(2):
        assert np.max(np.abs(C.controls[:, i])) <= np.max(np.abs(D.apply_directional(i, f))) / c


def test_controls_reject_floor_violation(unit_square_33, axis2d_33):
    G = unit_square_33
    r0 = DensityField.uniform(G)
    r1 = DensityField.from_expression(G, "x1 + 0.01")
    with pytest.raises(DensityBoundError):
        steering_controls(axis2d_33, np.zeros(G.size), r0, r1, c=0.5)


SYSTEMS = [("axis2d", 0.0, 17), ("heisenberg", -1.0, 9), ("grushin", -1.0, 17),
           ("unicycle", -1.0, 9)]


@pytest.mark.parametrize("name, lo, n", SYSTEMS)
def test_steering_satisfies_discrete_continuity(name, lo, n):
    F = builtin_fields(name)
    G = build_grid(([lo] * F.dimension, [1.0] * F.dimension), [n] * F.dimension)
    D = assemble_form_operator(G, F)
    rng = np.random.default_rng(n)
    tol = 1e-8
    for _ in range(3):
        r0, r1 = random_density(G, rng), random_density(G, rng)
        f = steering_potential(D, r0, r1, tol=tol)
        C = steering_controls(D, f, r0, r1)
        assert continuity_residual(C.densities, C, D) <= 10 * tol


def test_residual_of_zero_controls(unit_square_33, axis2d_33, rng):
    G, D = unit_square_33, axis2d_33
    times = time_grid(4)
    zero = np.zeros((5, 2, G.size))
    u = DensityField.uniform(G)
    flat = np.tile(u.values, (5, 1))
    C = ControlField(times, zero, flat, np.zeros((1, G.size)), 0.0)
    assert continuity_residual(flat, C, D) == 0.0
    r1 = random_density(G, rng)
    path = flat + times[:, None] * (r1.values - u.values)
    C = ControlField(times, zero, path, np.zeros((1, G.size)), 0.0)
    assert continuity_residual(path, C, D) == pytest.approx(
        np.max(np.abs(D.mass * (r1.values - u.values))), rel=1e-12)


def test_tracking_constant_path(unit_square_33, axis2d_33, rng):
    r = random_density(unit_square_33, rng)
    C = tracking_controls(axis2d_33, [r, r, r], [0.0, 0.5, 1.0])
    # One-sided time differences of equal values leave only roundoff.
    assert np.max(np.abs(C.controls)) <= 1e-12


def test_tracking_linear_path_matches_steering(heisenberg_9, rng):
    D = heisenberg_9
    r0, r1 = random_density(D.grid, rng), random_density(D.grid, rng)
    times = time_grid(8)
    path = [interpolate_density(r0, r1, t) for t in times]
    T = tracking_controls(D, path, times, tol=1e-10)
    f = steering_potential(D, r0, r1, tol=1e-10)
    S = steering_controls(D, f, r0, r1, times)
    scale = np.max(np.abs(S.controls))
    assert np.max(np.abs(T.controls - S.controls)) <= 1e-7 * scale
    assert continuity_residual(path, T, D) <= 1e-9


def test_tracking_floor_violation_names_time(unit_square_33, axis2d_33):
    G = unit_square_33
    u = DensityField.uniform(G)
    bad = DensityField.from_expression(G, "x1")
    with pytest.raises(DensityBoundError) as info:
        tracking_controls(axis2d_33, [u, bad, u], [0.0, 0.5, 1.0])
    assert info.value.time_index == 1
    with pytest.raises(ConfigError):
        tracking_controls(axis2d_33, [u, u], [0.0, 0.5, 1.0])


def test_time_derivative_is_second_order():
    t = np.array([0.0, 0.2, 0.5, 0.6, 1.0])
    vals = np.stack([1 + 2 * t + 3 * t**2, -t**2], axis=1)
    exact = np.stack([2 + 6 * t, -2 * t], axis=1)
    np.testing.assert_allclose(time_derivative(vals, t), exact, atol=1e-12)
    with pytest.raises(ConfigError):
        time_derivative(vals[:2], np.array([0.0, 0.0]))


def test_energy_bound_equal_densities(axis2d_33, unit_square_33):
    u = DensityField.uniform(unit_square_33)
    rep = energy_bound(axis2d_33, np.zeros(unit_square_33.size), 9.8, u, u)
    assert rep["effort_lhs"] == 0.0 and rep["effort_rhs"] == 0.0 and rep["holds"]


def test_energy_bound_cosine_oracle(axis2d_64):
    D = axis2d_64
    r0, r1 = cosine_pair(D.grid)
    f = steering_potential(D, r0, r1, tol=1e-10)
    lam = spectral_gap(D).gap
    rep = energy_bound(D, f, lam, r0, r1)
    # int |d/dx1 (0.1 cos(pi x1)/pi^2)|^2 = 0.005/pi^2 over the unit square.
    assert rep["effort_lhs"] == pytest.approx(0.005 / np.pi**2, rel=1e-2)
    assert rep["effort_lhs"] == pytest.approx(float(f @ (D.L @ f)), rel=1e-12)
    assert rep["holds"] and rep["ratio"] <= 1.0
    with pytest.raises(NotControllableError):
        energy_bound(D, f, 0.0, r0, r1)


def test_energy_bound_random_pairs_heisenberg():
    G = build_grid(([-1.0] * 3, [1.0] * 3), [17] * 3)
    D = assemble_form_operator(G, builtin_fields("heisenberg"))
    lam = spectral_gap(D).gap
    rng = np.random.default_rng(50)
    for _ in range(50):
        r0, r1 = random_density(G, rng), random_density(G, rng)
        f = steering_potential(D, r0, r1)
        assert energy_bound(D, f, lam, r0, r1)["holds"]


def test_effort_bound_grows_as_gap_shrinks():
    G = build_grid(([-1, -1], [1, 1]), [17, 17])
    rng = np.random.default_rng(4)
    r0, r1 = random_density(G, rng), random_density(G, rng)
    rows = []
    for name in ("axis2d", "grushin"):
        D = assemble_form_operator(G, builtin_fields(name))
        lam = spectral_gap(D).gap
        f = steering_potential(D, r0, r1)
        rows.append((lam, energy_bound(D, f, lam, r0, r1)["effort_rhs"]))
    rows.sort()
    assert rows[0][1] >= rows[1][1]


def test_control_csv(unit_square_33, axis2d_33, rng):
    G = unit_square_33
    r0, r1 = random_density(G, rng), random_density(G, rng)
    f = steering_potential(axis2d_33, r0, r1)
    C = steering_controls(axis2d_33, f, r0, r1, time_grid(2))
    lines = C.csv(1).splitlines()
    assert lines[0] == "index,u_1,u_2" and len(lines) == G.size + 1
    assert float(lines[5].split(",")[2]) == C.controls[1, 1, 4]
