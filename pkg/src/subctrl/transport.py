"""Particle ensembles driven by grid feedback controls.

Particles sampled from a density are advected with classical RK4 under
``v(t, x) = sum_i u_i(t, x) g_i(x)``; controls are interpolated
multilinearly in space and linearly in time. A particle leaving the domain
is projected back onto it and counted once per control step.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .control import (
    ControlField,
    default_floor,
    steering_controls,
    steering_potential,
    time_grid,
)
from .errors import ConfigError, DomainError, EvaluationError
from .fields import VectorFieldSet, fields_at
from .grid import DensityField, GridDomain, interpolation_stencil, nearest_node
from .operators import DiscreteOperator
from .spectral import kernel_basis

log = logging.getLogger(__name__)

DEFAULT_SUBSTEPS = 8


@dataclass(eq=False)
class ParticleEnsemble:
    positions: np.ndarray
    seed: Optional[int] = None
    exits: int = 0
    trajectories: Optional[np.ndarray] = None  # (P, K+1, d)
    visited: Optional[np.ndarray] = None  # ball ever entered, per particle

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def trajectory_csv(self) -> str:
        if self.trajectories is None:
            raise ConfigError("ensemble has no stored trajectories")
        P, S, d = self.trajectories.shape
        buf = io.StringIO()
        buf.write("particle,step," + ",".join(f"x{k + 1}" for k in range(d)) + "\n")
        for p in range(P):
            for s in range(S):
                buf.write(f"{p},{s}," + ",".join(repr(float(c)) for c in self.trajectories[p, s]) + "\n")
        return buf.getvalue()


@dataclass
class ReachabilityReport:
    center: np.ndarray
    radius: float
    alpha: float
    reached: np.ndarray
    reached_terminal: np.ndarray
    exits: int
    extras: dict = field(default_factory=dict)

    @property
    def seeds(self) -> int:
        return int(self.reached.size)

    @property
    def fraction(self) -> float:
        return float(np.count_nonzero(self.reached)) / self.seeds

    @property
    def fraction_terminal(self) -> float:
        return float(np.count_nonzero(self.reached_terminal)) / self.seeds

    def to_dict(self) -> dict:
        out = {
            "fraction": self.fraction,
            "fraction_terminal": self.fraction_terminal,
            "seeds": self.seeds,
            "exits": int(self.exits),
            "y": [float(v) for v in self.center],
            "R": float(self.radius),
            "alpha": float(self.alpha),
        }
        out.update(self.extras)
        return out


# Cells ----------------------------------------------------------------------


def _cell_masses(G: GridDomain, values) -> np.ndarray:
    """Mass of every grid cell: mean of its corner values times cell volume.

    Masked-out corners count as zero. Returns a flat array over the
    ``prod(n_k - 1)`` cells in C order.
    """
    d = G.dimension
    full = np.zeros(G.shape)
    full.ravel()[G.active_flat] = values
    acc = np.zeros(tuple(n - 1 for n in G.shape))
    for corner in np.ndindex(*(2,) * d):
        sl = tuple(slice(c, c + n - 1) for c, n in zip(corner, G.shape))
        acc += full[sl]
    return (acc / 2**d * np.prod(G.spacing)).ravel()


def _cell_of(G: GridDomain, points) -> np.ndarray:
    rel = np.floor((points - G.lower) / G.spacing).astype(np.int64)
    rel = np.clip(rel, 0, np.asarray(G.shape) - 2)
    return np.ravel_multi_index(tuple(rel.T), tuple(n - 1 for n in G.shape))


def sample_density(rho: DensityField, P: int, seed: int = 0) -> ParticleEnsemble:
    """Draw ``P`` i.i.d. points from the cellwise-constant version of ``rho``."""
    if P < 1:
        raise ConfigError("particle count must be at least 1")
    G = rho.grid
    masses = _cell_masses(G, rho.values)
    cdf = np.cumsum(masses)
    if cdf[-1] <= 0:
        raise ConfigError("density has no mass on any cell")
    rng = np.random.default_rng(seed)
    u = rng.random(P) * cdf[-1]
    cells = np.minimum(np.searchsorted(cdf, u, side="right"), masses.size - 1)
    corner = np.stack(np.unravel_index(cells, tuple(n - 1 for n in G.shape)), axis=-1)
    pos = G.lower + (corner + rng.random((P, G.dimension))) * G.spacing
    return ParticleEnsemble(pos, seed=seed)


def density_distance(E: ParticleEnsemble, rho: DensityField) -> float:
    """L1 distance between the ensemble's cell histogram and cell-averaged ``rho``."""
    G = rho.grid
    masses = _cell_masses(G, rho.values)
    target = masses / masses.sum()
    counts = np.bincount(_cell_of(G, E.positions), minlength=masses.size)
    hist = counts / E.count
    return float(np.abs(hist - target).sum())


# Integration ----------------------------------------------------------------


@njit(cache=True)
def _interp_regular(U, pts, lower, spacing, shape, strides):
    # Points outside the box are clamped onto it.
    m = U.shape[0]
    P, d = pts.shape
    ncorner = 1 << d
    out = np.zeros((P, m))
    frac = np.empty(d)
    wts = np.empty(ncorner)
    offs = np.empty(ncorner, dtype=np.int64)
    for p in range(P):
        base = 0
        for k in range(d):
            r = (pts[p, k] - lower[k]) / spacing[k]
            top = shape[k] - 1
            if r < 0.0:
                r = 0.0
            elif r > top:
                r = top
            c = int(r)
            if c > top - 1:
                c = top - 1
            frac[k] = r - c
            base += c * strides[k]
        wts[0] = 1.0
        offs[0] = base
        size = 1
        for k in range(d):
            f = frac[k]
            for j in range(size):
                wts[size + j] = wts[j] * f
                offs[size + j] = offs[j] + strides[k]
                wts[j] *= 1.0 - f
            size *= 2
        for c in range(ncorner):
            w = wts[c]
            o = offs[c]
            for i in range(m):
                out[p, i] += w * U[i, o]
    return out


@njit(cache=True)
def _advance_constant(x, U0, U1, gconst, lower, spacing, shape, strides, dt, substeps,
                      center, r2, track, visited):
    """RK4 over one control step for constant fields on an unmasked grid.

    Controls are blended linearly in time between ``U0`` and ``U1``; points
    are clamped to the box after every substep. Returns per-particle flags
    marking a clamp.
    """
    P, d = x.shape
    m = U0.shape[0]
    ncorner = 1 << d
    moved = np.zeros(P, dtype=np.bool_)
    frac = np.empty(d)
    wts = np.empty(ncorner)
    offs = np.empty(ncorner, dtype=np.int64)
    u = np.empty(m)
    ks = np.empty((4, d))
    y = np.empty(d)
    xp = np.empty(d)
    stage_t = np.array([0.0, 0.5, 0.5, 1.0])
    stage_c = np.array([0.0, 0.5, 0.5, 1.0])
    for p in range(P):
        for k in range(d):
            xp[k] = x[p, k]
        for sub in range(substeps):
            for st in range(4):
                for k in range(d):
                    y[k] = xp[k] + (stage_c[st] * dt * ks[st - 1, k] if st > 0 else 0.0)
                s = (sub + stage_t[st]) / substeps
                base = 0
                for k in range(d):
                    r = (y[k] - lower[k]) / spacing[k]
                    top = shape[k] - 1
                    if r < 0.0:
                        r = 0.0
                    elif r > top:
                        r = top
                    c = int(r)
                    if c > top - 1:
                        c = top - 1
                    frac[k] = r - c
                    base += c * strides[k]
                wts[0] = 1.0
                offs[0] = base
                size = 1
                for k in range(d):
                    f = frac[k]
                    for j in range(size):
                        wts[size + j] = wts[j] * f
                        offs[size + j] = offs[j] + strides[k]
                        wts[j] *= 1.0 - f
                    size *= 2
                for i in range(m):
                    acc = 0.0
                    for c in range(ncorner):
                        o = offs[c]
                        acc += wts[c] * ((1.0 - s) * U0[i, o] + s * U1[i, o])
                    u[i] = acc
                for k in range(d):
                    v = 0.0
                    for i in range(m):
                        v += u[i] * gconst[i, k]
                    ks[st, k] = v
            dist = 0.0
            for k in range(d):
                xp[k] += dt / 6.0 * (ks[0, k] + 2.0 * ks[1, k] + 2.0 * ks[2, k] + ks[3, k])
                hi = lower[k] + spacing[k] * (shape[k] - 1)
                if xp[k] < lower[k]:
                    xp[k] = lower[k]
                    moved[p] = True
                elif xp[k] > hi:
                    xp[k] = hi
                    moved[p] = True
                dist += (xp[k] - center[k]) ** 2
            if track and dist < r2:
                visited[p] = True
        for k in range(d):
            x[p, k] = xp[k]
    return moved


class _Interpolator:
    """Precomputed multilinear interpolation, with a fast path for unmasked grids."""

    def __init__(self, G: GridDomain):
        self.G = G
        d = G.dimension
        self.corners = np.array(list(np.ndindex(*(2,) * d)))
        strides = np.array([int(np.prod(G.shape[k + 1:])) for k in range(d)])
        self.offsets = self.corners @ strides
        self.strides = strides
        self.fast = G.mask is None

    def stencil(self, pts):
        G = self.G
        if not self.fast:
            return interpolation_stencil(G, pts, check=False)
        rel = (pts - G.lower) / G.spacing
        cell = np.clip(np.floor(rel).astype(np.int64), 0, np.asarray(G.shape) - 2)
        frac = rel - cell
        base = cell @ self.strides
        idx = base[:, None] + self.offsets[None, :]
        wts = np.ones(idx.shape)
        for k in range(G.dimension):
            fk = frac[:, k:k + 1]
            wts *= np.where(self.corners[:, k][None, :] == 1, fk, 1.0 - fk)
        return idx, wts

    def __call__(self, U, pts):
        """Interpolate ``U`` of shape ``(m, N)`` at ``pts``; returns ``(P, m)``."""
        if self.fast:
            G = self.G
            return _interp_regular(
                np.ascontiguousarray(U), np.ascontiguousarray(pts), G.lower, G.spacing,
                np.asarray(G.shape, dtype=np.int64), self.strides.astype(np.int64),
            )
        idx, wts = self.stencil(pts)
        bad = idx < 0
        if bad.any():
            wts = np.where(bad, np.nan, wts)
            idx = np.where(bad, 0, idx)
        return np.einsum("mpc,pc->pm", U[:, idx], wts)


def _project(G: GridDomain, pts, tree_cache):
    """Clip to the box; on masked grids snap points over inactive nodes to the
    nearest active node. Returns (points, moved mask)."""
    clipped = np.clip(pts, G.lower, G.upper)
    moved = np.any(clipped != pts, axis=1)
    if G.mask is not None:
        rel = np.clip(np.rint((clipped - G.lower) / G.spacing).astype(np.int64), 0,
                      np.asarray(G.shape) - 1)
        off = G.index_map[tuple(rel.T)] < 0
        if off.any():
            if "tree" not in tree_cache:
                from scipy.spatial import cKDTree

                tree_cache["tree"] = cKDTree(G.coords)
            _, near = tree_cache["tree"].query(clipped[off])
            clipped[off] = G.coords[near]
            moved |= off
    return clipped, moved


def _velocity_fn(F: VectorFieldSet, interp, G):
    def velocity(U, x):
        if F.constant is not None and interp.fast:
            xe = x
            v = interp(U, x) @ F.constant
        else:
            xe = np.clip(x, G.lower, G.upper)
            u = interp(U, xe)  # (P, m)
            v = np.einsum("pm,pmd->pd", u, fields_at(F, xe))
        if not np.all(np.isfinite(v)):
            p = int(np.argmax(~np.all(np.isfinite(v), axis=1)))
            raise EvaluationError(
                f"non-finite velocity at {xe[p].tolist()} (interpolation over a masked-out region?)",
                point=xe[p],
            )
        return v

    return velocity


def integrate_ensemble(
    E: ParticleEnsemble,
    C: ControlField,
    F: VectorFieldSet,
    G: GridDomain,
    substeps: int = DEFAULT_SUBSTEPS,
    store: bool = False,
    ball=None,
    direction: float = 1.0,
) -> ParticleEnsemble:
    """Advect ``E`` with RK4 from ``t = 0`` to ``t = 1`` under the controls ``C``.

    ``ball = (center, radius)`` records in ``visited`` whether each particle
    entered the open ball at the start or after any RK4 substep.
    """
    if substeps < 1:
        raise ConfigError("substeps must be at least 1")
    if C.controls.shape[2] != G.size or F.dimension != G.dimension:
        raise ConfigError("controls, fields and grid are inconsistent")
    x = np.array(E.positions, dtype=float)
    if x.ndim != 2 or x.shape[1] != G.dimension:
        raise ConfigError("ensemble positions have the wrong shape")
    tol = 1e-12 * (G.upper - G.lower)
    if np.any((x < G.lower - tol) | (x > G.upper + tol)):
        raise DomainError("ensemble starts outside the grid box")
    interp = _Interpolator(G)
    velocity = _velocity_fn(F, interp, G)
    tree_cache = {}
    times = C.times
    K = len(times) - 1
    traj = np.empty((x.shape[0], K + 1, G.dimension)) if store else None
    if store:
        traj[:, 0] = x
    visited = None
    if ball is not None:
        center, radius = np.asarray(ball[0], dtype=float), float(ball[1])
        visited = np.sum((x - center) ** 2, axis=1) < radius**2
    exits = E.exits
    fused = F.constant is not None and G.mask is None
    if fused:
        shape = np.asarray(G.shape, dtype=np.int64)
        ctr = center if visited is not None else np.zeros(G.dimension)
        r2 = radius**2 if visited is not None else 0.0
        vis = visited if visited is not None else np.zeros(x.shape[0], dtype=bool)
    for k in range(K):
        U0, U1 = C.controls[k] * direction, C.controls[k + 1] * direction
        dt = (times[k + 1] - times[k]) / substeps
        if fused:
            left = _advance_constant(
                x, np.ascontiguousarray(U0), np.ascontiguousarray(U1),
                np.ascontiguousarray(F.constant, dtype=float), G.lower, G.spacing, shape,
                interp.strides.astype(np.int64), dt, substeps, ctr, r2, visited is not None, vis,
            )
            exits += int(np.count_nonzero(left))
            if store:
                traj[:, k + 1] = x
            continue
        left = np.zeros(x.shape[0], dtype=bool)
        for s in range(substeps):
            a = s / substeps
            b = (s + 0.5) / substeps
            c = (s + 1) / substeps
            Ua = (1 - a) * U0 + a * U1
            Ub = (1 - b) * U0 + b * U1
            Uc = (1 - c) * U0 + c * U1
            k1 = velocity(Ua, x)
            k2 = velocity(Ub, x + 0.5 * dt * k1)
            k3 = velocity(Ub, x + 0.5 * dt * k2)
            k4 = velocity(Uc, x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            x, moved = _project(G, x, tree_cache)
            left |= moved
            if visited is not None:
                visited |= np.sum((x - center) ** 2, axis=1) < radius**2
        exits += int(np.count_nonzero(left))
        if store:
            traj[:, k + 1] = x
    return ParticleEnsemble(x, seed=E.seed, exits=exits, trajectories=traj, visited=visited)


def flow_points(F: VectorFieldSet, i: int, points, tau: float, steps: int = 16,
                box=None) -> np.ndarray:
    """Flow ``points`` along ``g_i`` for time ``tau`` (RK4, ``steps`` steps)."""
    x = np.array(points, dtype=float)
    h = tau / steps

    def g(y):
        if box is not None:
            y = np.clip(y, box[0], box[1])
        return F.field_values(i, y)

    for _ in range(steps):
        k1 = g(x)
        k2 = g(x + 0.5 * h * k1)
        k3 = g(x + 0.5 * h * k2)
        k4 = g(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if box is not None:
            x = np.clip(x, box[0], box[1])
    return x


# Experiments ----------------------------------------------------------------


def gaussian_target(G: GridDomain, center, alpha: float, floor: float) -> DensityField:
    """Normalized ``exp(-|p - y|^2 / alpha)`` mixed with a uniform floor.

    The uniform component carries total mass ``2 * floor * vol`` so the
    result stays above ``floor`` everywhere, as steering requires.
    """
    if alpha <= 0:
        raise ConfigError("kernel width alpha must be positive")
    center = np.asarray(center, dtype=float)
    raw = np.exp(-np.sum((G.coords - center) ** 2, axis=1) / alpha)
    gauss = raw / (G.weights @ raw)
    beta = 2.0 * floor * G.volume
    if beta >= 1:
        raise ConfigError("density floor is too large for a Gaussian target")
    return DensityField.normalized(G, (1 - beta) * gauss + beta / G.volume)


def reach_experiment(
    F: VectorFieldSet,
    G: GridDomain,
    D: DiscreteOperator,
    y,
    R: float,
    alpha: Optional[float] = None,
    tol: float = 1e-8,
    steps: int = 64,
    substeps: int = DEFAULT_SUBSTEPS,
    c: Optional[float] = None,
    floor: Optional[float] = None,
    reverse: bool = False,
) -> ReachabilityReport:
    """Steer uniform mass toward a Gaussian around ``y`` and test which grid
    seeds reach the ball ``B_R(y)``.

    One seed per interior node (nodes on the boundary of the discrete
    domain are not points of the open set and are reported separately as
    ``fraction_all_nodes``). A seed counts as reached if its trajectory is
    inside the open ball at any RK4 substep. With ``reverse=True`` the
    swapped problem (Gaussian to uniform, i.e. negated time-reversed
    controls) is also run from the forward terminal positions, and its
    reached fraction is reported as ``fraction_reverse``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (G.dimension,):
        raise ConfigError(f"target point must have dimension {G.dimension}")
    if R <= 0:
        raise ConfigError("radius R must be positive")
    if np.any(y < G.lower) or np.any(y > G.upper) or (
        G.mask is not None and G.index_map[tuple(np.rint((y - G.lower) / G.spacing).astype(int))] < 0
    ):
        raise DomainError(f"target point {y.tolist()} lies outside the domain")
    alpha = (R / 3.0) ** 2 if alpha is None else alpha
    c = default_floor(G) if c is None else c
    rho0 = DensityField.uniform(G)
    rho1 = gaussian_target(G, y, alpha, c)
    times = time_grid(steps)
    f = steering_potential(D, rho0, rho1, tol=tol, c=c, floor=floor)
    C = steering_controls(D, f, rho0, rho1, times, c)
    seeds = ParticleEnsemble(G.coords.copy())
    out = integrate_ensemble(seeds, C, F, G, substeps=substeps, ball=(y, R))
    terminal = np.sum((out.positions - y) ** 2, axis=1) < R**2
    inner = G.interior
    report = ReachabilityReport(y, R, alpha, out.visited[inner], terminal[inner], out.exits)
    report.extras["fraction_all_nodes"] = float(np.count_nonzero(out.visited)) / out.count
    if reverse:
        fb = steering_potential(D, rho1, rho0, tol=tol, c=c, floor=floor)
        Cb = steering_controls(D, fb, rho1, rho0, times, c)
        back = integrate_ensemble(
            ParticleEnsemble(out.positions[inner].copy()), Cb, F, G, substeps=substeps,
            ball=(y, R),
        )
        report.extras["fraction_reverse"] = float(np.count_nonzero(back.visited)) / back.count
    return report


def default_flow_time(F: VectorFieldSet, G: GridDomain) -> float:
    norms = np.max([np.linalg.norm(F.field_values(i, G.coords), axis=1).max()
                    for i in range(F.count)])
    extent = float(np.min(G.upper - G.lower))
    return 0.05 * extent / norms if norms > 0 else 0.05 * extent


def invariance_defect(
    F: VectorFieldSet,
    G: GridDomain,
    xi,
    tau: Optional[float] = None,
    samples: int = 2000,
    seed: int = 0,
) -> float:
    """Largest change of the nodal indicator ``xi`` under the flows ``e^{+-tau g_i}``.

    ``xi`` is read at the nearest active node. Zero means that no sample
    point left (or entered) the set, i.e. the set looks invariant.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (G.size,):
        raise ConfigError(f"indicator must have {G.size} nodal values")
    if not np.all((xi == 0) | (xi == 1)):
        raise ConfigError("indicator values must be 0 or 1")
    tau = default_flow_time(F, G) if tau is None else tau
    rng = np.random.default_rng(seed)
    pts = G.lower + rng.random((samples, G.dimension)) * (G.upper - G.lower)
    start = xi[nearest_node(G, pts)]
    worst = 0.0
    for i in range(F.count):
        for sign in (1.0, -1.0):
            end = flow_points(F, i, pts, sign * tau, box=(G.lower, G.upper))
            worst = max(worst, float(np.max(np.abs(xi[nearest_node(G, end)] - start))))
    return worst


def weighted_median(values, weights) -> float:
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    k = int(np.searchsorted(cum, 0.5 * cum[-1]))
    return float(values[order][k])


def detect_invariant_sets(
    D: DiscreteOperator,
    G: GridDomain,
    F: VectorFieldSet,
    tol: float = 1e-8,
    kmax: int = 16,
    seed: int = 0,
    samples: int = 2000,
    tie: float = 1e-4,
) -> list:
    """Candidate invariant partitions from the near-kernel of ``L``.

    Each kernel vector is split at its M-weighted median into ``A = {v > med}``
    and its complement; duplicate (or complementary) partitions are dropped.
    Values within ``tie * range(v)`` of the median count as equal to it, so
    eigensolver noise does not split a level set of the exact kernel vector.
    Returns ``(indicator of A, invariance defect)`` pairs.
    """
    basis = kernel_basis(D, tol, kmax=kmax, seed=seed)
    out, seen = [], set()
    for v in basis:
        med = weighted_median(v, D.mass)
        xi = (v > med + tie * np.ptp(v)).astype(float)
        if xi.all() or not xi.any():
            xi = (v >= med).astype(float)
            if xi.all() or not xi.any():
                continue
        key = xi.tobytes()
        comp = (1.0 - xi).tobytes()
        if key in seen or comp in seen:
            continue
        seen.add(key)
        out.append((xi, invariance_defect(F, G, xi, samples=samples, seed=seed)))
    return out


def slice_counts(G: GridDomain, positions, axis: int) -> np.ndarray:
    """Particle counts per cell layer along ``axis``."""
    rel = np.floor((positions[:, axis] - G.lower[axis]) / G.spacing[axis]).astype(np.int64)
    rel = np.clip(rel, 0, G.shape[axis] - 2)
    return np.bincount(rel, minlength=G.shape[axis] - 1)


def slice_mass_excess(G: GridDomain, initial: ParticleEnsemble, terminal: ParticleEnsemble,
                      axis: int) -> int:
    """Largest gain of any cell layer along ``axis`` between two ensembles.

    Transport that cannot cross layers keeps every layer's terminal mass at
    or below its initial mass, so the excess is zero.
    """
    return int(np.max(slice_counts(G, terminal.positions, axis)
                      - slice_counts(G, initial.positions, axis)))
