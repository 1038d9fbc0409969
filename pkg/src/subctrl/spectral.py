"""Spectral gap, near-kernel bases and the singular Poisson solve.

All eigenproblems are posed for the pencil ``(L, M)`` on the subspace of
M-mean-zero vectors, i.e. ``M^{-1} L`` is treated as self-adjoint in the
M-inner product.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as la

from .errors import ConfigError, ConvergenceError, NotControllableError
from .operators import DiscreteOperator, apply_operator

log = logging.getLogger(__name__)

DEFAULT_GAP_FLOOR = 1e-9


@dataclass
class SpectralReport:
    """Result of :func:`spectral_gap`."""

    gap: float
    eigenvector: np.ndarray
    residual: float
    kernel_dim: int
    iterations: int
    restarts: int
    floor: float
    grid: dict = field(default_factory=dict)

    @property
    def controllable(self) -> bool:
        return self.gap > self.floor

    def to_dict(self) -> dict:
        return {
            "lambda": float(self.gap),
            "residual": float(self.residual),
            "kernel_dim": int(self.kernel_dim),
            "iterations": int(self.iterations),
            "restarts": int(self.restarts),
            "gap_floor": float(self.floor),
            "certifiably_controllable": bool(self.controllable),
            "grid": self.grid,
        }


def project_mean_zero(v, M) -> np.ndarray:
    """Remove the M-weighted mean: ``v - (1^T M v / 1^T M 1) 1``.

    ``M`` is the diagonal of the mass matrix. Works columnwise on 2-D input.
    """
    v = np.asarray(v, dtype=float)
    M = np.asarray(M, dtype=float)
    mean = (M @ v) / M.sum()
    return v - mean


def gap_floor(D: DiscreteOperator, relative: float = DEFAULT_GAP_FLOOR) -> float:
    return relative * D.gershgorin()


def _m_orthogonalize(w, basis, mass, fixed=None):
    # Two passes of classical Gram-Schmidt in the M-inner product. When
    # ``fixed`` is given it is projected out inside each pass too; doing it
    # only once lets the basis projection reintroduce a roundoff-sized
    # component that a small Lanczos beta then amplifies.
    for _ in range(2):
        if fixed is not None:
            w = w - fixed @ (fixed.T @ (mass * w))
        if basis.shape[1]:
            w = w - basis @ (basis.T @ (mass * w))
    return w


def _lanczos_smallest(D, tol, maxiter, rng, deflate=None, max_restarts=5, check_every=10):
    """Smallest eigenpair of ``(L, M)`` on the M-complement of constants and
    ``deflate``. Returns ``(lam, v, residual, steps, restarts)``."""
    N = D.size
    mass = D.mass
    ones = np.ones((N, 1)) / np.sqrt(mass.sum())
    fixed = ones if deflate is None or deflate.shape[1] == 0 else np.hstack([ones, deflate])
    dim = N - fixed.shape[1]
    if dim <= 0:
        raise ConfigError("no mean-zero subspace left to search")
    maxiter = min(maxiter, dim)

    def fresh(Q):
        for _ in range(3):
            q = _m_orthogonalize(rng.standard_normal(N), Q, mass, fixed)
            nrm = np.sqrt(q @ (mass * q))
            if nrm > 1e-8:
                return q / nrm
        raise ConvergenceError("could not draw a fresh Lanczos start vector")

    Q = np.empty((N, min(maxiter, dim) + max_restarts + 1))
    alphas, betas = [], []
    restarts = 0
    q = fresh(Q[:, :0])
    best = None
    scale = max(D.gershgorin(), 1e-300)
    j = 0
    while True:
        Q[:, j] = q
        w = apply_operator(D, q) / mass
        alpha = float(q @ (mass * w))
        w = _m_orthogonalize(w, Q[:, : j + 1], mass, fixed)
        beta = float(np.sqrt(max(w @ (mass * w), 0.0)))
        alphas.append(alpha)
        j += 1
        breakdown = beta <= 1e-12 * scale
        last = j >= maxiter
        if breakdown or last or j % check_every == 0:
            y = _smallest_ritz(alphas, betas)
            v = Q[:, :j] @ y
            v = _m_orthogonalize(v, fixed, mass)
            v /= np.sqrt(v @ (mass * v))
            Lv = apply_operator(D, v)
            lam = float(v @ Lv)
            r = Lv - lam * mass * v
            res = float(np.sqrt(r @ (r / mass)))
            best = (lam, v, res, j, restarts)
            if res <= tol:
                return best
            if last:
                raise ConvergenceError(
                    f"Lanczos did not converge in {j} steps (residual {res:.3e} > {tol:.3e})",
                    residual=res, iterations=j,
                )
        if breakdown:
            if restarts >= max_restarts or j >= dim:
                raise ConvergenceError(
                    f"Lanczos broke down {restarts + 1} times without converging",
                    residual=best[2] if best else None, iterations=j,
                )
            restarts += 1
            log.debug("Lanczos breakdown at step %d; restarting", j)
            q = fresh(Q[:, :j])
            betas.append(0.0)
            continue
        betas.append(beta)
        q = w / beta


def _smallest_ritz(alphas, betas):
    """Eigenvector of the Lanczos tridiagonal for its smallest eigenvalue."""
    if len(alphas) == 1:
        return np.ones(1)
    a, b = np.array(alphas), np.array(betas)
    try:
        _, S = la.eigh_tridiagonal(a, b, select="i", select_range=(0, 0), lapack_driver="stebz")
    except la.LinAlgError:
        _, S = la.eigh_tridiagonal(a, b, lapack_driver="stev")
    return S[:, 0]


def spectral_gap(
    D: DiscreteOperator,
    tol: float = 1e-6,
    maxiter: int = 3000,
    seed: int = 0,
    floor: float | None = None,
    kernel_tol: float | None = None,
) -> SpectralReport:
    """Smallest generalized eigenvalue of ``(L, M)`` on mean-zero vectors.

    Parameters
    ----------
    tol : float
        Required eigen-residual ``||L v - lam M v||_{M^{-1}}``.
    floor : float, optional
        Absolute gap floor; defaults to ``1e-9`` times the Gershgorin bound
        of ``M^{-1} L``.
    kernel_tol : float, optional
        Rayleigh-quotient threshold for counting near-kernel vectors; defaults
        to ``floor``. The count is only computed when the gap itself is below
        this threshold.
    """
    if tol <= 0:
        raise ConfigError("eigen-residual tolerance must be positive")
    floor = gap_floor(D) if floor is None else floor
    rng = np.random.default_rng(seed)
    lam, v, res, steps, restarts = _lanczos_smallest(D, tol, maxiter, rng)
    kernel_dim = 0
    ktol = floor if kernel_tol is None else kernel_tol
    if lam <= ktol:
        kernel_dim = len(
            kernel_basis(D, ktol, kmax=64, seed=seed, maxiter=maxiter, residual_tol=tol)
        )
    report = SpectralReport(
        gap=max(lam, 0.0) if lam > -1e-10 else lam,
        eigenvector=v,
        residual=res,
        kernel_dim=kernel_dim,
        iterations=steps,
        restarts=restarts,
        floor=floor,
        grid=D.grid.describe(),
    )
    D.cache.setdefault("gap", report)
    return report


def kernel_basis(
    D: DiscreteOperator,
    tol: float = 1e-8,
    kmax: int = 16,
    seed: int = 0,
    maxiter: int = 3000,
    residual_tol: float | None = None,
) -> list:
    """M-orthonormal mean-zero vectors with Rayleigh quotient ``<= tol``.

    Vectors are found one at a time: each Lanczos run deflates the constants
    and every vector found so far, so repeated kernel eigenvalues are
    recovered. The list is empty iff the gap exceeds ``tol``.
    """
    rng = np.random.default_rng(seed)
    mass = D.mass
    found = []
    limit = min(kmax, D.size - 1)
    while len(found) < limit:
        basis = np.stack(found, axis=1) if found else np.empty((D.size, 0))
        # Converging the residual to within sqrt(tol) pins the Ritz value to ~tol.
        rtol = residual_tol if residual_tol is not None else max(np.sqrt(tol), 1e-12)
        try:
            lam, v, _, _, _ = _lanczos_smallest(D, rtol, maxiter, rng, deflate=basis)
        except ConvergenceError as exc:
            if exc.residual is not None and found:
                break
            raise
        if lam > tol:
            break
        v = _m_orthogonalize(v, basis, mass)
        v = v / np.sqrt(v @ (mass * v))
        found.append(v)
    return found


def poincare_ratio(D: DiscreteOperator, f) -> float:
    """``(f^T L f) / (f~^T M f~)`` with ``f~`` the mean-zero part of ``f``."""
    f = np.asarray(f, dtype=float)
    ft = project_mean_zero(f, D.mass)
    denom = float(ft @ (D.mass * ft))
    scale = float(f @ (D.mass * f))
    if denom <= 1e-28 * max(scale, 1e-300) or denom == 0.0:
        raise ConfigError("Poincare ratio is undefined for constant functions")
    return float(f @ apply_operator(D, f)) / denom


def _ensure_gap(D, floor, **gap_kwargs):
    report = D.cache.get("gap")
    if report is None:
        report = spectral_gap(D, **gap_kwargs)
    floor = report.floor if floor is None else floor
    if report.gap <= floor:
        raise NotControllableError(
            f"system not certifiably controllable: spectral gap {report.gap:.3e} is below "
            f"the floor {floor:.3e} (near-kernel dimension {report.kernel_dim})",
            gap=report.gap, floor=floor,
        )
    return report


def solve_poisson(
    D: DiscreteOperator,
    rhs,
    tol: float = 1e-8,
    maxiter: int | None = None,
    floor: float | None = None,
    check_gap: bool = True,
) -> np.ndarray:
    """Solve ``L f = rhs`` for M-mean-zero ``f`` by projected, Jacobi-scaled CG.

    ``rhs`` is projected onto the range of ``L`` (Euclidean-orthogonal to
    constants, i.e. ``rhs = M g`` with ``g`` M-mean-zero). The operator's
    spectral gap is checked first (and cached on ``D``); a gap at or below
    the floor raises :class:`NotControllableError`.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (D.size,):
        raise ConfigError(f"right-hand side must have length {D.size}")
    if check_gap:
        _ensure_gap(D, floor)
    mass = D.mass
    b = rhs - rhs.sum() / mass.sum() * mass
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(D.size)
    maxiter = maxiter or 10 * D.size
    diag = D.L.diagonal().copy()
    diag[diag <= 0] = 1.0

    x = np.zeros(D.size)
    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = apply_operator(D, p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        # Keep the residual in range(L); roundoff drifts it toward constants.
        r -= r.sum() / mass.sum() * mass
        if np.linalg.norm(r) <= tol * bnorm:
            break
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    x = project_mean_zero(x, mass)
    res = float(np.linalg.norm(apply_operator(D, x) - b))
    if res > tol * bnorm:
        raise ConvergenceError(
            f"CG stopped after {it} iterations with relative residual {res / bnorm:.3e}",
            residual=res / bnorm, iterations=it,
        )
    log.debug("CG converged in %d iterations", it)
    return x
