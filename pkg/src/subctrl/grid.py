"""Uniform tensor grids on a box with an optional interior mask."""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError
from .expr import Expression


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Box ``[lower, upper]`` sampled with ``shape[k]`` nodes along axis ``k``.

    Active nodes (``mask`` true, or all nodes when there is no mask) are
    enumerated in lexicographic (C) order of their multi-index; that order
    fixes every vector and matrix built on the grid.
    """

    lower: np.ndarray
    upper: np.ndarray
    shape: tuple
    mask: Optional[np.ndarray] = None
    mask_text: Optional[str] = None

    @property
    def dimension(self) -> int:
        return len(self.shape)

    @cached_property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.asarray(self.shape) - 1)

    @cached_property
    def active_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    @cached_property
    def active_flat(self) -> np.ndarray:
        return np.flatnonzero(self.active_mask.ravel())

    @cached_property
    def index_map(self) -> np.ndarray:
        """Full-grid array holding each node's active index, or -1."""
        out = np.full(self.shape, -1, dtype=np.int64)
        out.ravel()[self.active_flat] = np.arange(self.active_flat.size)
        return out

    @property
    def size(self) -> int:
        return int(self.active_flat.size)

    @cached_property
    def multi_index(self) -> np.ndarray:
        """``(N, d)`` integer multi-indices of the active nodes."""
        return np.stack(np.unravel_index(self.active_flat, self.shape), axis=-1)

    @cached_property
    def coords(self) -> np.ndarray:
        """``(N, d)`` coordinates of the active nodes."""
        return self.lower + self.multi_index * self.spacing

    @cached_property
    def interior(self) -> np.ndarray:
        """Boolean flag per active node: all ``2d`` axis neighbors are active.

        Nodes failing this lie on the boundary of the discretized domain.
        """
        full = np.pad(self.active_mask, 1, constant_values=False)
        ok = self.active_mask.copy()
        for k in range(self.dimension):
            for shift in (-1, 1):
                ok &= np.roll(full, shift, axis=k)[(slice(1, -1),) * self.dimension]
        return ok.ravel()[self.active_flat]

    @cached_property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @cached_property
    def weights(self) -> np.ndarray:
        return quad_weights(self)

    def axis_coords(self, k: int) -> np.ndarray:
        return np.linspace(self.lower[k], self.upper[k], self.shape[k])

    def describe(self) -> dict:
        out = {
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
            "resolution": [int(n) for n in self.shape],
            "active_nodes": self.size,
        }
        if self.mask_text is not None:
            out["mask"] = self.mask_text
        return out


def build_grid(box, resolution: Sequence[int], mask: Optional[str] = None) -> GridDomain:
    """Build a grid from corner pair ``box = (lower, upper)`` and node counts.

    ``mask`` is an indicator expression in ``x1..xd`` evaluated at the node
    coordinates; nodes where it is nonzero belong to the domain.
    """
    lower = np.asarray(box[0], dtype=float)
    upper = np.asarray(box[1], dtype=float)
    shape = tuple(int(n) for n in resolution)
    if lower.shape != upper.shape or lower.ndim != 1 or lower.size == 0:
        raise ConfigError("box corners must be vectors of equal dimension")
    if len(shape) != lower.size:
        raise ConfigError(f"resolution has {len(shape)} entries but box dimension is {lower.size}")
    if any(n < 3 for n in shape):
        raise ConfigError(f"every axis needs at least 3 nodes, got {list(shape)}")
    if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)) or np.any(upper <= lower):
        raise ConfigError("box is degenerate: need lower < upper on every axis")

    grid = GridDomain(lower, upper, shape)
    if mask is None:
        return grid

    pred = Expression(mask, dimension=len(shape))
    axes = np.meshgrid(*[grid.axis_coords(k) for k in range(len(shape))], indexing="ij")
    pts = np.stack(axes, axis=-1)
    active = np.asarray(pred(pts) != 0, dtype=bool)
    n_active = int(active.sum())
    if n_active == 0:
        raise ConfigError(f"mask {mask!r} leaves no active nodes")
    if n_active < 2:
        raise ConfigError("at least two active nodes are required")
    structure = ndimage.generate_binary_structure(len(shape), 1)
    _, ncomp = ndimage.label(active, structure=structure)
    if ncomp != 1:
        raise ConfigError(f"mask {mask!r} yields a disconnected active set ({ncomp} components)")
    return GridDomain(lower, upper, shape, active, mask)


def quad_weights(G: GridDomain) -> np.ndarray:
    """Tensor-product trapezoid weights restricted to the active nodes."""
    w = np.ones(G.size)
    for k, n in enumerate(G.shape):
        w1 = np.full(n, G.spacing[k])
        w1[0] = w1[-1] = G.spacing[k] / 2
        w = w * w1[G.multi_index[:, k]]
    return w


def _cell_location(G: GridDomain, points: np.ndarray):
    rel = (points - G.lower) / G.spacing
    n = np.asarray(G.shape)
    cell = np.clip(np.floor(rel).astype(np.int64), 0, n - 2)
    frac = rel - cell
    return cell, frac


def interpolation_stencil(G: GridDomain, points, check: bool = True):
    """Active-node indices and weights for multilinear interpolation.

    Returns ``(idx, wts)`` of shape ``(P, 2**d)``. Masked-out corners are
    replaced by the nearest active corner of the same cell (fewest differing
    axes, then lowest corner number); a corner slot is -1 only when the
    whole cell is inactive.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = G.dimension
    if check:
        tol = 1e-12 * (G.upper - G.lower)
        outside = np.any((points < G.lower - tol) | (points > G.upper + tol), axis=1)
        if outside.any():
            p = points[np.argmax(outside)]
            raise DomainError(f"point {p.tolist()} lies outside the grid box")
    cell, frac = _cell_location(G, points)
    corners = np.array(np.unravel_index(np.arange(2**d), (2,) * d)).T  # (2^d, d)
    idx = np.empty((points.shape[0], 2**d), dtype=np.int64)
    wts = np.ones((points.shape[0], 2**d))
    for c, offs in enumerate(corners):
        node = cell + offs
        idx[:, c] = G.index_map[tuple(node.T)]
        for k in range(d):
            wts[:, c] *= frac[:, k] if offs[k] else 1.0 - frac[:, k]
    if G.mask is not None:
        missing = idx < 0
        if missing.any():
            fixed = idx.copy()
            for c in range(2**d):
                dist = np.abs(corners - corners[c]).sum(axis=1)
                order = np.lexsort((np.arange(2**d), dist))
                need = missing[:, c]
                for other in order[1:]:
                    take = need & (idx[:, other] >= 0)
                    fixed[take, c] = idx[take, other]
                    need = need & ~take
            idx = fixed
    return idx, wts


def interpolate_many(G: GridDomain, v, points, check: bool = True) -> np.ndarray:
    """Multilinear interpolation of nodal data ``v`` (shape ``(N, ...)``) at points.

    Cells with no active corner yield NaN.
    """
    v = np.asarray(v, dtype=float)
    idx, wts = interpolation_stencil(G, points, check=check)
    bad = idx < 0
    vals = v[np.where(bad, 0, idx)]
    wts = np.where(bad, np.nan, wts)
    wts = wts.reshape(wts.shape + (1,) * (v.ndim - 1))
    return np.sum(vals * wts, axis=1)


def interpolate(G: GridDomain, v, x) -> float:
    """Multilinear interpolation of the nodal vector ``v`` at the point ``x``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (G.size,):
        raise ConfigError(f"nodal vector must have length {G.size}")
    return float(interpolate_many(G, v, np.asarray(x, dtype=float)[None, :])[0])


def nearest_node(G: GridDomain, points) -> np.ndarray:
    """Active index of the grid node nearest to each point (masked grids snap
    to the nearest active node)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rel = np.rint((points - G.lower) / G.spacing).astype(np.int64)
    rel = np.clip(rel, 0, np.asarray(G.shape) - 1)
    idx = G.index_map[tuple(rel.T)]
    if (idx < 0).any():
        from scipy.spatial import cKDTree

        tree = cKDTree(G.coords)
        _, near = tree.query(points[idx < 0])
        idx[idx < 0] = near
    return idx


def grid_csv(G: GridDomain) -> str:
    """CSV dump of every node: ``index,x1..xd,weight,mask``."""
    d = G.dimension
    buf = io.StringIO()
    buf.write("index," + ",".join(f"x{k + 1}" for k in range(d)) + ",weight,mask\n")
    axes = np.meshgrid(*[G.axis_coords(k) for k in range(d)], indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=-1)
    imap = G.index_map.ravel()
    w = G.weights
    for flat in range(pts.shape[0]):
        a = imap[flat]
        coords = ",".join(repr(float(c)) for c in pts[flat])
        weight = repr(float(w[a])) if a >= 0 else "0.0"
        buf.write(f"{a},{coords},{weight},{int(a >= 0)}\n")
    return buf.getvalue()


class DensityField:
    """Nonnegative nodal density integrating to one under the grid quadrature."""

    def __init__(self, grid: GridDomain, values, atol: float = 1e-10):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.size,):
            raise ConfigError(f"density needs {grid.size} nodal values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("density values must be finite")
        if np.any(values < 0):
            raise ConfigError(f"density is negative at node {int(np.argmin(values))}")
        mass = float(grid.weights @ values)
        if abs(mass - 1.0) > atol:
            raise ConfigError(f"density integrates to {mass!r}, expected 1")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)

    @classmethod
    def normalized(cls, grid: GridDomain, values) -> "DensityField":
        values = np.asarray(values, dtype=float)
        mass = float(grid.weights @ values)
        if not np.isfinite(mass) or mass <= 0:
            raise ConfigError("density has nonpositive total mass")
        return cls(grid, values / mass)

    @classmethod
    def from_expression(cls, grid: GridDomain, text: str) -> "DensityField":
        """Evaluate ``text`` at the nodes and normalize to unit mass."""
        expr = Expression(text, dimension=grid.dimension)
        return cls.normalized(grid, expr(grid.coords))

    @classmethod
    def uniform(cls, grid: GridDomain) -> "DensityField":
        return cls.normalized(grid, np.ones(grid.size))

    def __repr__(self):
        return f"DensityField(N={self.grid.size}, min={self.values.min():.3g})"
