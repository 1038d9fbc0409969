"""Density-steering feedback and exact-tracking controls.

Sign convention: ``L`` is the PSD operator ``-Delta_H``. A density path
obeys the continuity equation ``d rho/dt + div(v rho) = 0`` with velocity
``v = sum_i u_i g_i``; in weak discrete form, with ``u_i rho = D_i f``,

    M d rho/dt = sum_i D_i^T M (u_i rho) = L f,

so the steering potential solves ``L f = M (rho_1 - rho_0)`` and the
tracking potential solves ``L f_k = M d rho/dt (t_k)``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DensityBoundError, NotControllableError
from .grid import DensityField
from .operators import DiscreteOperator
from .spectral import solve_poisson

DEFAULT_STEPS = 64
DEFAULT_FLOOR_FACTOR = 1e-3


@dataclass(frozen=True, eq=False)
class ControlField:
    """Nodal feedback controls on a time grid.

    ``controls[k, i]`` holds ``u_i(t_k, .)`` at the active nodes and
    ``densities[k]`` the density ``rho(t_k, .)`` it was divided by.
    ``potentials`` is ``(1, N)`` for steering and ``(K+1, N)`` for tracking.
    """

    times: np.ndarray
    controls: np.ndarray
    densities: np.ndarray
    potentials: np.ndarray
    floor: float

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def count(self) -> int:
        return self.controls.shape[1]

    def csv(self, k: int) -> str:
        """Controls at time index ``k`` as ``index,u_1..u_m`` CSV."""
        buf = io.StringIO()
        buf.write("index," + ",".join(f"u_{i + 1}" for i in range(self.count)) + "\n")
        for node in range(self.controls.shape[2]):
            vals = ",".join(repr(float(u)) for u in self.controls[k, :, node])
            buf.write(f"{node},{vals}\n")
        return buf.getvalue()


def default_floor(grid) -> float:
    return DEFAULT_FLOOR_FACTOR / grid.volume


def time_grid(steps: int = DEFAULT_STEPS) -> np.ndarray:
    if steps < 1:
        raise ConfigError("the time grid needs at least one step")
    return np.linspace(0.0, 1.0, steps + 1)


def interpolate_density(rho0: DensityField, rho1: DensityField, t: float) -> DensityField:
    """The linear interpolant ``rho_0 + t (rho_1 - rho_0)``."""
    if rho0.grid is not rho1.grid:
        raise ConfigError("densities live on different grids")
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"time {t} is outside [0, 1]")
    if t == 0.0:
        return rho0
    if t == 1.0:
        return rho1
    return DensityField(rho0.grid, rho0.values + t * (rho1.values - rho0.values))


def _check_floor(values, c, time_index=None):
    low = int(np.argmin(values))
    if values[low] < c:
        where = f" at time index {time_index}" if time_index is not None else ""
        raise DensityBoundError(
            f"density {values[low]:.3e} at node {low}{where} is below the lower bound c = {c:.3e}",
            node=low, time_index=time_index,
        )


def _check_grid(D: DiscreteOperator, *densities):
    for rho in densities:
        if rho.grid is not D.grid:
            raise ConfigError("density and operator live on different grids")


def steering_potential(
    D: DiscreteOperator,
    rho0: DensityField,
    rho1: DensityField,
    tol: float = 1e-8,
    c: Optional[float] = None,
    floor: Optional[float] = None,
) -> np.ndarray:
    """Mean-zero ``f`` with ``L f = M (rho_1 - rho_0)``."""
    _check_grid(D, rho0, rho1)
    c = default_floor(D.grid) if c is None else c
    _check_floor(rho0.values, c)
    _check_floor(rho1.values, c)
    rhs = D.mass * (rho1.values - rho0.values)
    if not np.any(rhs):
        return np.zeros(D.size)
    return solve_poisson(D, rhs, tol=tol, floor=floor)


def _controls_from_potential(D, f, rho):
    grad = np.stack([D.apply_directional(i, f) for i in range(D.fields.count)])
    return grad / rho


def steering_controls(
    D: DiscreteOperator,
    f,
    rho0: DensityField,
    rho1: DensityField,
    times=None,
    c: Optional[float] = None,
) -> ControlField:
    """``u_i(t_k, x) = (D_i f)(x) / rho(t_k, x)`` along the linear interpolant."""
    _check_grid(D, rho0, rho1)
    times = time_grid() if times is None else np.asarray(times, dtype=float)
    c = default_floor(D.grid) if c is None else c
    f = np.asarray(f, dtype=float)
    dens = rho0.values[None, :] + times[:, None] * (rho1.values - rho0.values)[None, :]
    for k, row in enumerate(dens):
        _check_floor(row, c, k)
    grad = np.stack([D.apply_directional(i, f) for i in range(D.fields.count)])
    controls = grad[None, :, :] / dens[:, None, :]
    return ControlField(times, controls, dens, f[None, :].copy(), c)


def time_derivative(values, times) -> np.ndarray:
    """Second-order ``d rho/dt``: central inside, one-sided at the ends."""
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise ConfigError("a density path needs at least two time stamps")
    if np.any(np.diff(times) <= 0):
        raise ConfigError("time stamps must be strictly increasing")
    edge = 2 if len(times) >= 3 else 1
    return np.gradient(values, times, axis=0, edge_order=edge)


def tracking_controls(
    D: DiscreteOperator,
    path: Sequence[DensityField],
    times,
    c: Optional[float] = None,
    tol: float = 1e-8,
    floor: Optional[float] = None,
) -> ControlField:
    """Controls ``u_i = D_i f_k / rho(t_k)`` with ``L f_k = M d rho/dt (t_k)``."""
    times = np.asarray(times, dtype=float)
    if len(path) != len(times):
        raise ConfigError(f"{len(path)} densities but {len(times)} time stamps")
    _check_grid(D, *path)
    c = default_floor(D.grid) if c is None else c
    dens = np.stack([rho.values for rho in path])
    for k, row in enumerate(dens):
        _check_floor(row, c, k)
    drho = time_derivative(dens, times)
    pots = np.empty_like(dens)
    controls = np.empty((len(times), D.fields.count, D.size))
    for k in range(len(times)):
        rhs = D.mass * drho[k]
        try:
            pots[k] = solve_poisson(D, rhs, tol=tol, floor=floor) if np.any(rhs) else 0.0
        except NotControllableError as exc:
            raise NotControllableError(f"time index {k}: {exc}", exc.gap, exc.floor) from None
        controls[k] = _controls_from_potential(D, pots[k], dens[k])
    return ControlField(times, controls, dens, pots, c)


def energy_bound(D: DiscreteOperator, f, lam: float, rho0: DensityField, rho1: DensityField,
                 floor: Optional[float] = None) -> dict:
    """Compare the control effort with its Lax-Milgram bound.

    ``effort_lhs = sum_i |D_i f|_M^2 = f^T L f`` and
    ``effort_rhs = |rho_1 - rho_0|_M^2 / lam``; ``ratio`` is lhs/rhs, the
    steering-effort index (1 would mean the bound is attained).
    """
    if floor is not None and lam <= floor:
        raise NotControllableError(
            f"spectral gap {lam:.3e} is below the floor {floor:.3e}", gap=lam, floor=floor
        )
    if lam <= 0:
        raise NotControllableError(f"spectral gap {lam:.3e} is not positive", gap=lam)
    f = np.asarray(f, dtype=float)
    lhs = 0.0
    for i in range(D.fields.count):
        g = D.apply_directional(i, f)
        lhs += float(g @ (D.mass * g))
    diff = rho1.values - rho0.values
    rhs = float(diff @ (D.mass * diff)) / lam
    ratio = lhs / rhs if rhs > 0 else 0.0
    return {
        "effort_lhs": lhs,
        "effort_rhs": rhs,
        "ratio": ratio,
        "holds": bool(lhs <= rhs * (1 + 1e-6)),
    }


def continuity_residual(densities, C: ControlField, D: DiscreteOperator, times=None) -> float:
    """Max over time of ``|M d rho/dt - sum_i D_i^T M (u_i rho)|_inf``.

    ``densities`` is a ``(K+1, N)`` array or a list of DensityField on the
    time grid of ``C``.
    """
    if isinstance(densities, (list, tuple)) and densities and isinstance(densities[0], DensityField):
        densities = np.stack([rho.values for rho in densities])
    dens = np.asarray(densities, dtype=float)
    times = C.times if times is None else np.asarray(times, dtype=float)
    if dens.shape != (len(times), D.size) or C.controls.shape[0] != len(times):
        raise ConfigError("density path, controls and time grid are inconsistent")
    drho = time_derivative(dens, times)
    worst = 0.0
    for k in range(len(times)):
        flux = np.zeros(D.size)
        for i in range(D.fields.count):
            q = D.mass * (C.controls[k, i] * dens[k])
            flux += D.incidence.T @ (D.edge_maps[i].T @ q)
        worst = max(worst, float(np.max(np.abs(D.mass * drho[k] - flux))))
    return worst
