"""Discrete directional derivatives and the form operator ``L ~ -Delta_H``.

Differences are built in factored form: an edge-incidence matrix ``E``
(one row per pair of axis-adjacent active nodes, entries -1/+1) followed by
an integer combination of edge differences scaled by ``g / (2h)``. Since
``E @ const == 0`` exactly, constants lie in the kernel of every ``D_i``
and of ``L`` without roundoff.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .errors import ConfigError, EvaluationError
from .fields import VectorFieldSet, fields_at
from .grid import GridDomain


@dataclass(eq=False)
class DiscreteOperator:
    """Sparse symmetric PSD ``L``, diagonal mass ``M`` and the ``D_i``."""

    grid: GridDomain
    fields: VectorFieldSet
    L: sparse.csr_matrix
    mass: np.ndarray  # diagonal of M
    D: list
    incidence: sparse.csr_matrix  # E, edges x N
    edge_maps: list  # P_i with D_i = P_i @ E
    edge_form: sparse.csr_matrix  # Q with L = E^T Q E
    weight: Optional[np.ndarray] = None
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.L.shape[0]

    def apply_directional(self, i: int, v: np.ndarray) -> np.ndarray:
        return self.edge_maps[i] @ (self.incidence @ v)

    def gershgorin(self) -> float:
        """Largest Gershgorin row bound of ``M^{-1} L``."""
        rows = np.asarray(abs(self.L).sum(axis=1)).ravel()
        return float(np.max(rows / self.mass))


def _axis_edges(G: GridDomain, j: int):
    """Edges along axis ``j`` as (tail, head) active-index pairs plus a lookup
    from each active node to its outgoing/incoming edge number (-1 if none)."""
    imap = G.index_map
    n = G.shape[j]
    lo = [slice(None)] * G.dimension
    hi = [slice(None)] * G.dimension
    lo[j] = slice(0, n - 1)
    hi[j] = slice(1, n)
    tail = imap[tuple(lo)]
    head = imap[tuple(hi)]
    ok = (tail >= 0) & (head >= 0)
    tails = tail[ok]
    heads = head[ok]
    order = np.argsort(tails, kind="stable")
    tails, heads = tails[order], heads[order]
    out_edge = np.full(G.size, -1, dtype=np.int64)
    in_edge = np.full(G.size, -1, dtype=np.int64)
    out_edge[tails] = np.arange(tails.size)
    in_edge[heads] = np.arange(tails.size)
    return tails, heads, out_edge, in_edge


def _axis_difference(G: GridDomain, j: int):
    """Return ``(E_j, B_j)`` with ``(B_j @ E_j) / (2 h_j)`` the axis-``j`` derivative.

    Interior rows are central; a node missing one neighbor gets the
    second-order one-sided formula when two nodes are available on the
    other side and the first-order one otherwise; isolated rows are zero.
    """
    tails, heads, out_edge, in_edge = _axis_edges(G, j)
    N, ne = G.size, tails.size
    E = sparse.csr_matrix(
        (np.r_[-np.ones(ne), np.ones(ne)], (np.r_[np.arange(ne), np.arange(ne)], np.r_[tails, heads])),
        shape=(ne, N),
    )
    rows, cols, vals = [], [], []
    node = np.arange(N)
    has_out = out_edge >= 0
    has_in = in_edge >= 0

    # central: (u+ - u-) = e_in + e_out
    c = has_out & has_in
    rows += [node[c], node[c]]
    cols += [in_edge[c], out_edge[c]]
    vals += [np.ones(c.sum()), np.ones(c.sum())]

    # forward: -3u0 + 4u1 - u2 = 3 e_out(0) - e_out(1); fallback 2 e_out(0)
    f = has_out & ~has_in
    nxt = np.where(f, heads[np.where(f, out_edge, 0)] if ne else 0, 0)
    e1 = np.where(f, out_edge[nxt], -1) if ne else np.full(N, -1)
    f2 = f & (e1 >= 0)
    f1 = f & (e1 < 0)
    rows += [node[f2], node[f2], node[f1]]
    cols += [out_edge[f2], e1[f2], out_edge[f1]]
    vals += [3 * np.ones(f2.sum()), -np.ones(f2.sum()), 2 * np.ones(f1.sum())]

    # backward: 3u0 - 4u-1 + u-2 = 3 e_in(0) - e_in(-1); fallback 2 e_in(0)
    b = has_in & ~has_out
    prv = np.where(b, tails[np.where(b, in_edge, 0)] if ne else 0, 0)
    e1 = np.where(b, in_edge[prv], -1) if ne else np.full(N, -1)
    b2 = b & (e1 >= 0)
    b1 = b & (e1 < 0)
    rows += [node[b2], node[b2], node[b1]]
    cols += [in_edge[b2], e1[b2], in_edge[b1]]
    vals += [3 * np.ones(b2.sum()), -np.ones(b2.sum()), 2 * np.ones(b1.sum())]

    B = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, ne)
    )
    return E, B


def _difference_factors(G: GridDomain):
    key = "_difference_factors"
    cached = G.__dict__.get(key)
    if cached is None:
        parts = [_axis_difference(G, j) for j in range(G.dimension)]
        E = sparse.vstack([p[0] for p in parts], format="csr")
        cached = (E, [p[1] for p in parts])
        G.__dict__[key] = cached
    return cached


def _node_field_values(G: GridDomain, F: VectorFieldSet) -> np.ndarray:
    if F.dimension != G.dimension:
        raise ConfigError(f"fields live in R^{F.dimension} but the grid is {G.dimension}-dimensional")
    try:
        return fields_at(F, G.coords)  # (N, m, d)
    except EvaluationError as exc:
        raise EvaluationError(f"vector fields are not finite on the grid: {exc}",
                              exc.point, exc.field) from None


def _edge_map(G: GridDomain, gvals: np.ndarray) -> sparse.csr_matrix:
    """``P`` with ``P @ E`` equal to ``sum_j diag(g^j / 2h_j) B_j E_j``."""
    _, Bs = _difference_factors(G)
    blocks = [sparse.diags(gvals[:, j] / (2 * G.spacing[j])) @ Bs[j] for j in range(G.dimension)]
    return sparse.hstack(blocks, format="csr")


def assemble_directional(G: GridDomain, F: VectorFieldSet, i: int) -> sparse.csr_matrix:
    """Sparse ``D_i`` approximating ``X_i h = sum_j g_i^j dh/dx_j`` at the nodes."""
    if not 0 <= i < F.count:
        raise ConfigError(f"field index {i} out of range for m = {F.count}")
    E, _ = _difference_factors(G)
    gvals = _node_field_values(G, F)
    D = (_edge_map(G, gvals[:, i, :]) @ E).tocsr()
    D.sort_indices()
    return D


def assemble_form_operator(
    G: GridDomain, F: VectorFieldSet, weight=None
) -> DiscreteOperator:
    """Assemble ``L = sum_i D_i^T diag(a w) D_i`` and ``M = diag(a w)``.

    This is the discrete form ``sigma(u, v) = sum_i int (X_i u)(X_i v) a dx``;
    ``L`` is symmetric positive semidefinite with constants in its kernel,
    and the weak form supplies natural boundary behavior.
    """
    w = G.weights
    if weight is not None:
        weight = np.asarray(weight, dtype=float)
        if weight.shape != (G.size,):
            raise ConfigError(f"weight must have one value per active node ({G.size})")
        if not np.all(np.isfinite(weight)) or np.any(weight <= 0):
            raise ConfigError(f"weight must be positive; node {int(np.argmin(weight))} is not")
        mass = weight * w
    else:
        mass = w.copy()

    E, _ = _difference_factors(G)
    gvals = _node_field_values(G, F)
    Mdiag = sparse.diags(mass)
    P = [_edge_map(G, gvals[:, i, :]) for i in range(F.count)]
    Q = sum((p.T @ Mdiag @ p for p in P[1:]), P[0].T @ Mdiag @ P[0]).tocsr()
    L = (E.T @ Q @ E).tocsr()
    L = ((L + L.T) * 0.5).tocsr()
    L.sum_duplicates()
    L.sort_indices()
    D = []
    for p in P:
        Di = (p @ E).tocsr()
        Di.sort_indices()
        D.append(Di)
    return DiscreteOperator(G, F, L, mass, D, E, P, Q, weight)


def apply_operator(D: DiscreteOperator, v) -> np.ndarray:
    """Matrix-free ``L v = sum_i D_i^T (M (D_i v))``."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != D.size:
        raise ConfigError(f"vector length {v.shape[0]} does not match operator size {D.size}")
    ev = D.incidence @ v
    return D.incidence.T @ (D.edge_form @ ev)


def operator_dump(D: DiscreteOperator) -> str:
    """Coordinate dump of ``L``: header ``N nnz`` then sorted ``row col value``."""
    coo = D.L.tocoo()
    order = np.lexsort((coo.col, coo.row))
    buf = io.StringIO()
    buf.write(f"{D.size} {coo.nnz}\n")
    for k in order:
        buf.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")
    return buf.getvalue()
