"""Nonlinear solvers for the coupled five-field system.

Two strategies: a decoupled fixed-point iteration alternating an elasticity
solve and a Darcy solve (Picard), and monolithic Newton with analytic
derivatives of the permeability weight.  Both sit on a sparse direct LU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from . import assembly
from .assembly import Discretization, eliminate
from .mesh import TriMesh
from .physics import ManufacturedCase
from .spaces import (DISPLACEMENT, FIELDS, FLUX, PRESSURE, ROTATION, STRESS)

PICARD = "picard"
NEWTON = "newton"

PIVOT_FLOOR = 1e-14


class SolverError(Exception):
    """Linear or nonlinear solve failure."""


class SingularSystemError(SolverError):
    """Factorisation produced a zero or tiny pivot."""

    def __init__(self, pivot: float, index: int):
        self.pivot = pivot
        self.index = index
        super().__init__(f"singular linear system: pivot {pivot:.3e} "
                         f"at position {index}")


class ConvergenceError(SolverError):
    """Nonlinear iteration failed to converge within the budget."""

    def __init__(self, method: str, history):
        self.method = method
        self.history = list(history)
        super().__init__(f"{method} iteration did not converge in "
                         f"{len(self.history)} steps; residual history "
                         f"{[f'{r:.3e}' for r in self.history]}")


@dataclass(frozen=True)
class SolverConfig:
    method: str = NEWTON
    tol: float = 1e-7
    max_iter: int = 25

    def __post_init__(self):
        if self.method not in (PICARD, NEWTON):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class Solution:
    mesh: TriMesh
    layouts: dict
    sigma: np.ndarray
    u: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    p: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)

    @property
    def fields(self) -> dict:
        return {STRESS: self.sigma, DISPLACEMENT: self.u, ROTATION: self.rho,
                FLUX: self.phi, PRESSURE: self.p}


def linear_solve(matrix: sps.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Sparse LU solve with a pivot check and one refinement step."""
    A = matrix.tocsc()
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SingularSystemError(0.0, -1) from exc
    piv = np.abs(lu.U.diagonal())
    scale = max(piv.max(), 1.0)
    if piv.min() <= PIVOT_FLOOR * scale:
        raise SingularSystemError(float(piv.min()), int(np.argmin(piv)))
    x = lu.solve(rhs)
    x += lu.solve(rhs - A @ x)
    return x


def _solution_from_vector(disc: Discretization, X: np.ndarray, iters: int,
                          residuals) -> Solution:
    parts = disc.split(X)
    return Solution(disc.mesh, disc.layouts, parts[STRESS].copy(),
                    parts[DISPLACEMENT].copy(), parts[ROTATION].copy(),
                    parts[FLUX].copy(), parts[PRESSURE].copy(), iters,
                    list(residuals))


def solve_elasticity(disc: Discretization, case: ManufacturedCase,
                     p_hat: np.ndarray):
    """Three-field elasticity solve at frozen pressure p_hat."""
    H, F, _, _ = assembly.assemble_rhs(disc.ctx, case)
    rhs = np.concatenate([H - disc.C.T @ p_hat, F,
                          np.zeros(disc.layouts[ROTATION].ndof)])
    M = sps.bmat([[disc.A, disc.B_u.T, disc.B_rho.T],
                  [disc.B_u, None, None],
                  [disc.B_rho, None, None]], format="csr")
    idx, vals = disc.essential(case)
    ns = disc.layouts[STRESS].ndof
    mask = idx < ns
    M2, rhs2 = eliminate(M, rhs, idx[mask], vals[mask])
    X = linear_solve(M2, rhs2)
    nu = disc.layouts[DISPLACEMENT].ndof
    return X[:ns], X[ns:ns + nu], X[ns + nu:]


def solve_darcy(disc: Discretization, case: ManufacturedCase,
                sigma_hat: np.ndarray, p_hat: np.ndarray):
    """Two-field Darcy solve with permeability at (sigma_hat, p_hat)."""
    _, _, Ht, Ft = assembly.assemble_rhs(disc.ctx, case)
    At = assembly.assemble_a_tilde(disc.ctx, sigma_hat, p_hat)
    M = sps.bmat([[At, disc.B_t.T],
                  [disc.B_t, -disc.c_t]], format="csr")
    rhs = np.concatenate([Ht, Ft + disc.C @ sigma_hat])
    idx, vals = disc.essential(case)
    ns = disc.layouts[STRESS].ndof
    nu = disc.layouts[DISPLACEMENT].ndof
    nr = disc.layouts[ROTATION].ndof
    mask = idx >= ns
    M2, rhs2 = eliminate(M, rhs, idx[mask] - (ns + nu + nr), vals[mask])
    X = linear_solve(M2, rhs2)
    nf = disc.layouts[FLUX].ndof
    return X[:nf], X[nf:]


def _l2_pressure(disc: Discretization, p: np.ndarray) -> float:
    return float(np.sqrt(np.sum(disc.ctx.geo.area * p ** 2)))


def picard_solve(disc: Discretization, case: ManufacturedCase,
                 config: SolverConfig | None = None) -> Solution:
    """Fixed-point iteration p <- T(p): elasticity then Darcy."""
    config = config or SolverConfig(method=PICARD)
    p_hat = np.zeros(disc.layouts[PRESSURE].ndof)
    history = []
    for it in range(1, config.max_iter + 1):
        sigma, u, rho = solve_elasticity(disc, case, p_hat)
        phi, p = solve_darcy(disc, case, sigma, p_hat)
        change = _l2_pressure(disc, p - p_hat)
        history.append(change)
        p_hat = p
        if change <= config.tol * max(1.0, _l2_pressure(disc, p)):
            return Solution(disc.mesh, disc.layouts, sigma, u, rho, phi, p,
                            it, history)
    raise ConvergenceError(PICARD, history)


def newton_solve(disc: Discretization, case: ManufacturedCase,
                 config: SolverConfig | None = None) -> Solution:
    """Monolithic Newton iteration from a zero initial guess."""
    config = config or SolverConfig(method=NEWTON)
    rhs = disc.rhs(case)
    idx, vals = disc.essential(case)
    X = np.zeros(disc.total_dofs)
    X[idx] = vals

    def free_residual(vec):
        r = vec.copy()
        r[idx] = 0.0
        return float(np.linalg.norm(r))

    parts = disc.split(X)
    r = disc.matrix(parts[STRESS], parts[PRESSURE]) @ X - rhs
    r0 = free_residual(r)
    history = [r0]
    if r0 <= config.tol:
        return _solution_from_vector(disc, X, 0, history)
    for it in range(1, config.max_iter + 1):
        parts = disc.split(X)
        J = disc.matrix(parts[STRESS], parts[PRESSURE],
                        newton_state=(parts[STRESS], parts[PRESSURE],
                                      parts[FLUX]))
        J2, rhs2 = eliminate(J, -r, idx, np.zeros(idx.size))
        X = X + linear_solve(J2, rhs2)
        X[idx] = vals
        parts = disc.split(X)
        r = disc.matrix(parts[STRESS], parts[PRESSURE]) @ X - rhs
        rn = free_residual(r)
        history.append(rn)
        if rn <= config.tol * max(1.0, r0):
            return _solution_from_vector(disc, X, it, history)
    raise ConvergenceError(NEWTON, history)


def solve(mesh: TriMesh, case: ManufacturedCase,
          config: SolverConfig | None = None,
          disc: Discretization | None = None) -> Solution:
    """Solve the coupled problem on a mesh with the configured method."""
    config = config or SolverConfig()
    if disc is None:
        disc = Discretization(mesh, case.params)
    if config.method == PICARD:
        return picard_solve(disc, case, config)
    return newton_solve(disc, case, config)
