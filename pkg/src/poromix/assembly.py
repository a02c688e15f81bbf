"""Global assembly of the five-field saddle-point system.

Unknown ordering: (stress, displacement, rotation, flux, pressure).  The two
Darcy rows are negated at assembly so the fixed-point (Picard) matrix is
symmetric indefinite; solutions are unchanged.  Neumann-boundary stress and
flux DOFs are essential and eliminated symmetrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

from . import physics, spaces
from .mesh import GAMMA_D, GAMMA_N, TriMesh
from .physics import ManufacturedCase, ParameterSet
from .spaces import (CellGeometry, DISPLACEMENT, FLUX, PRESSURE, ROTATION,
                     STRESS, FIELDS)

EDGE_QUAD_DEGREE = 6


@dataclass
class SparseSystem:
    matrix: sps.csr_matrix
    rhs: np.ndarray
    offsets: dict
    essential_idx: np.ndarray
    essential_val: np.ndarray


def field_offsets(layouts: dict) -> dict:
    out = {}
    start = 0
    for f in FIELDS:
        out[f] = (start, start + layouts[f].ndof)
        start += layouts[f].ndof
    out["total"] = start
    return out


class ElementContext:
    """Cached per-cell basis tables at the form quadrature points."""

    def __init__(self, mesh: TriMesh, layouts: dict, params: ParameterSet):
        self.mesh = mesh
        self.layouts = layouts
        self.params = params
        self.geo = CellGeometry(mesh)
        degree = 6 if params.law == physics.EXPONENTIAL else 4
        self.quad = spaces.triangle_quadrature(degree)
        self.points = self.geo.physical_points(self.quad.bary)     # (C, Q, 2)
        self.weights = (2.0 * self.geo.area[:, None]
                        * self.quad.weights[None, :])              # (C, Q)
        self.rt_vals, self.rt_div = spaces.rt0_values(self.geo, self.quad.bary)
        self.bub_vals, self.bub_grads = spaces.bubble_values(self.geo,
                                                             self.quad.bary)
        self.hat_vals = self.quad.bary                             # (Q, 3)

        # stress local basis: dofs (row r, j) with j in {3 edges, bubble}
        self.stress_row = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        vec = np.concatenate([self.rt_vals, self.bub_vals[:, :, None, :]],
                             axis=2)                               # (C, Q, 4, 2)
        self.stress_vec = np.concatenate([vec, vec], axis=2)       # (C, Q, 8, 2)
        # trace of the tensor basis: component r of the row-r vector part
        self.stress_tr = np.concatenate(
            [vec[..., 0], vec[..., 1]], axis=2)                    # (C, Q, 8)
        # tau_12 - tau_21 for the rotation coupling
        self.stress_skew = np.concatenate(
            [vec[..., 1], -vec[..., 0]], axis=2)                   # (C, Q, 8)

        self.edge_x, self.edge_w = spaces.edge_quadrature(EDGE_QUAD_DEGREE)
        self._edge_geometry()

    def _edge_geometry(self):
        mesh = self.mesh
        p = mesh.vertices[mesh.edges]                  # (E, 2, 2)
        self.edge_pts = (p[:, 0, None, :]
                         + self.edge_x[None, :, None]
                         * (p[:, 1] - p[:, 0])[:, None, :])        # (E, G, 2)
        self.edge_len = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        self.edge_normal = mesh.edge_normals()
        self.edge_tangent = np.stack(
            [-self.edge_normal[:, 1], self.edge_normal[:, 0]], axis=1)

    # -- evaluation of discrete iterates at quadrature points ---------------

    def stress_trace_at_qp(self, sigma_coef: np.ndarray) -> np.ndarray:
        coefs = sigma_coef[self.layouts[STRESS].cell_dofs]          # (C, 8)
        return np.einsum("ca,cqa->cq", coefs, self.stress_tr)

    def flux_at_qp(self, phi_coef: np.ndarray) -> np.ndarray:
        coefs = phi_coef[self.layouts[FLUX].cell_dofs]              # (C, 3)
        return np.einsum("ca,cqax->cqx", coefs, self.rt_vals)


# -- individual blocks ---------------------------------------------------------

def assemble_a(ctx: ElementContext) -> sps.csr_matrix:
    """Stress-stress block: integral of C^{-1} sigma : tau."""
    pr = ctx.params
    dl = pr.dlam2mu
    row = ctx.stress_row
    same_row = (row[:, None] == row[None, :]).astype(float)
    dots = np.einsum("cq,cqax,cqbx->cab", ctx.weights, ctx.stress_vec,
                     ctx.stress_vec)
    trs = np.einsum("cq,cqa,cqb->cab", ctx.weights, ctx.stress_tr,
                    ctx.stress_tr)
    local = dots * same_row / (2.0 * pr.mu) - trs * pr.lam / (2.0 * pr.mu * dl)
    return _scatter(local, ctx.layouts[STRESS], ctx.layouts[STRESS])


def assemble_b(ctx: ElementContext):
    """Divergence and rotation couplings: returns (B_u, B_rho).

    B_u has shape (n_u, n_sigma) with entries b(tau, (v, 0)); B_rho has
    shape (n_rho, n_sigma) with entries b(tau, (0, eta)).
    """
    lay_s = ctx.layouts[STRESS]
    lay_u = ctx.layouts[DISPLACEMENT]
    lay_r = ctx.layouts[ROTATION]
    C = ctx.mesh.num_cells

    # divergence part: only edge dofs, component = row index
    local_u = np.zeros((C, 2, 8))
    for r in range(2):
        local_u[:, r, 4 * r:4 * r + 3] = ctx.rt_div * ctx.geo.area[:, None]
    B_u = _scatter(local_u, lay_u, lay_s)

    local_r = np.einsum("cq,qi,cqa->cia", ctx.weights, ctx.hat_vals,
                        ctx.stress_skew)
    B_rho = _scatter(local_r, lay_r, lay_s)
    return B_u, B_rho


def assemble_c(ctx: ElementContext) -> sps.csr_matrix:
    """Pressure-trace coupling c(tau, q); shape (n_p, n_sigma)."""
    pr = ctx.params
    scale = pr.alpha / pr.dlam2mu
    local = scale * np.einsum("cq,cqa->ca", ctx.weights, ctx.stress_tr)
    return _scatter(local[:, None, :], ctx.layouts[PRESSURE],
                    ctx.layouts[STRESS])


def assemble_a_tilde(ctx: ElementContext, sigma_coef, p_coef) -> sps.csr_matrix:
    """Weighted RT0 mass matrix with 1/kappa at the current iterate."""
    kinv = _kappa_inv_at_qp(ctx, sigma_coef, p_coef)
    local = np.einsum("cq,cq,cqax,cqbx->cab", ctx.weights, kinv,
                      ctx.rt_vals, ctx.rt_vals)
    return _scatter(local, ctx.layouts[FLUX], ctx.layouts[FLUX])


def _kappa_inv_at_qp(ctx, sigma_coef, p_coef):
    trs = ctx.stress_trace_at_qp(sigma_coef)
    pq = p_coef[:, None]
    try:
        return physics.kappa_inv(trs, pq * np.ones_like(trs), ctx.params)
    except physics.PermeabilityError as exc:
        # identify an offending cell for diagnostics
        k = physics.kappa(trs, pq * np.ones_like(trs), ctx.params)
        bad = int(np.argwhere(~(k > 1e-12 * ctx.params.dlam2mu))[0][0])
        raise physics.PermeabilityError(f"{exc} (cell {bad})") from exc


def assemble_b_tilde(ctx: ElementContext) -> sps.csr_matrix:
    """Divergence coupling b~(psi, q); shape (n_p, n_phi); exact entries."""
    local = (ctx.rt_div * ctx.geo.area[:, None])[:, None, :]
    return _scatter(local, ctx.layouts[PRESSURE], ctx.layouts[FLUX])


def assemble_c_tilde(ctx: ElementContext) -> sps.csr_matrix:
    """Pressure mass scaled by the effective storativity (diagonal)."""
    gt = physics.gamma_tilde(ctx.params)
    return sps.diags(gt * ctx.geo.area).tocsr()


def assemble_newton_coupling(ctx: ElementContext, sigma_coef, p_coef,
                             phi_coef):
    """Derivative of the Darcy weight: blocks (n_phi, n_sigma), (n_phi, n_p)."""
    trs = ctx.stress_trace_at_qp(sigma_coef)
    pq = np.broadcast_to(p_coef[:, None], trs.shape)
    d_tr, d_p = physics.kappa_inv_derivatives(trs, pq, ctx.params)
    phi_q = ctx.flux_at_qp(phi_coef)                    # (C, Q, 2)
    psi_dot_phi = np.einsum("cqix,cqx->cqi", ctx.rt_vals, phi_q)
    loc_s = np.einsum("cq,cq,cqi,cqa->cia", ctx.weights, d_tr, psi_dot_phi,
                      ctx.stress_tr)
    N_sigma = _scatter(loc_s, ctx.layouts[FLUX], ctx.layouts[STRESS])
    loc_p = np.einsum("cq,cq,cqi->ci", ctx.weights, d_p, psi_dot_phi)
    N_p = _scatter(loc_p[:, :, None], ctx.layouts[FLUX],
                   ctx.layouts[PRESSURE])
    return N_sigma, N_p


def assemble_rhs(ctx: ElementContext, case: ManufacturedCase):
    """Load vectors (H, F, H_tilde, F_tilde) in the unnegated convention."""
    mesh = ctx.mesh
    x, y = ctx.points[..., 0], ctx.points[..., 1]

    F = np.zeros(ctx.layouts[DISPLACEMENT].ndof)
    fv = case.f(x, y)                                    # (C, Q, 2)
    cellF = -np.einsum("cq,cqx->cx", ctx.weights, fv)
    np.add.at(F, ctx.layouts[DISPLACEMENT].cell_dofs, cellF)

    Ft = np.zeros(ctx.layouts[PRESSURE].ndof)
    gv = case.g(x, y)
    np.add.at(Ft, ctx.layouts[PRESSURE].cell_dofs[:, 0],
              -np.einsum("cq,cq->c", ctx.weights, gv))

    H = np.zeros(ctx.layouts[STRESS].ndof)
    Ht = np.zeros(ctx.layouts[FLUX].ndof)
    dirichlet = mesh.boundary_edges(GAMMA_D)
    if dirichlet.size:
        pts = ctx.edge_pts[dirichlet]                    # (Ed, G, 2)
        w = ctx.edge_w[None, :] * ctx.edge_len[dirichlet, None]
        uD = case.u_dirichlet(pts[..., 0], pts[..., 1])  # (Ed, G, 2)
        pD = case.p_dirichlet(pts[..., 0], pts[..., 1])
        # boundary basis has unit outward normal trace on its edge
        mom = np.einsum("eg,egx->ex", w, uD)             # (Ed, 2)
        E = mesh.num_edges
        for r in range(2):
            H[r * E + dirichlet] = mom[:, r]
        Ht[dirichlet] = np.einsum("eg,eg->e", w, pD)
    return H, F, Ht, Ft


def essential_values(ctx: ElementContext, case: ManufacturedCase):
    """Neumann-edge stress/flux DOF values (global indices, in field order)."""
    mesh = ctx.mesh
    lay = ctx.layouts
    offs = field_offsets(lay)
    neumann = mesh.boundary_edges(GAMMA_N)
    idx = []
    val = []
    if neumann.size:
        pts = ctx.edge_pts[neumann]
        w = ctx.edge_w[None, :]
        n = ctx.edge_normal[neumann]                      # (En, 2)
        tn = case.traction(pts[..., 0], pts[..., 1],
                           np.broadcast_to(n[:, None, :], pts.shape))
        # DOF = mean normal component over the edge
        mom = np.einsum("eg,egx->ex", w, tn)              # (En, 2)
        E = mesh.num_edges
        for r in range(2):
            idx.append(offs[STRESS][0] + r * E + neumann)
            val.append(mom[:, r])
        fn = case.normal_flux(pts[..., 0], pts[..., 1],
                              np.broadcast_to(n[:, None, :], pts.shape))
        idx.append(offs[FLUX][0] + neumann)
        val.append(np.einsum("eg,eg->e", w, fn))
    if not idx:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    idx = np.concatenate(idx)
    val = np.concatenate(val)
    order = np.argsort(idx)
    return idx[order], val[order]


def _scatter(local, row_layout, col_layout) -> sps.csr_matrix:
    """Accumulate per-cell local matrices (C, m, n) into a global CSR.

    Basis tables from rt0_values/bubble_values are already globally
    oriented, so no per-cell sign correction is applied here.
    """
    C, m, n = local.shape
    rows = np.repeat(row_layout.cell_dofs[:, :, None], n, axis=2)
    cols = np.repeat(col_layout.cell_dofs[:, None, :], m, axis=1)
    mat = sps.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(row_layout.ndof, col_layout.ndof))
    return mat.tocsr()


# -- monolithic system ---------------------------------------------------------

class Discretization:
    """One mesh + parameter set with all state-independent blocks cached."""

    def __init__(self, mesh: TriMesh, params: ParameterSet):
        self.mesh = mesh
        self.params = params
        self.layouts = spaces.build_layouts(mesh)
        self.ctx = ElementContext(mesh, self.layouts, params)
        self.offsets = field_offsets(self.layouts)
        self.A = assemble_a(self.ctx)
        self.B_u, self.B_rho = assemble_b(self.ctx)
        self.C = assemble_c(self.ctx)
        self.B_t = assemble_b_tilde(self.ctx)
        self.c_t = assemble_c_tilde(self.ctx)

    @property
    def total_dofs(self) -> int:
        return self.offsets["total"]

    def split(self, X: np.ndarray) -> dict:
        return {f: X[self.offsets[f][0]:self.offsets[f][1]] for f in FIELDS}

    def join(self, parts: dict) -> np.ndarray:
        return np.concatenate([parts[f] for f in FIELDS])

    def matrix(self, sigma_coef, p_coef, newton_state=None) -> sps.csr_matrix:
        """Five-field block matrix with the two Darcy rows negated.

        ``sigma_coef, p_coef`` set the permeability weight; when
        ``newton_state = (sigma, p, phi)`` the unsymmetric Jacobian
        couplings are added.
        """
        At = assemble_a_tilde(self.ctx, sigma_coef, p_coef)
        N_sigma = N_p = None
        if newton_state is not None:
            N_sigma, N_p = assemble_newton_coupling(self.ctx, *newton_state)
        blocks = [
            [self.A, self.B_u.T, self.B_rho.T, None, self.C.T],
            [self.B_u, None, None, None, None],
            [self.B_rho, None, None, None, None],
            [None if N_sigma is None else -N_sigma, None, None, -At,
             -self.B_t.T if N_p is None else -self.B_t.T - N_p],
            [self.C, None, None, -self.B_t, self.c_t],
        ]
        return sps.bmat(blocks, format="csr")

    def rhs(self, case: ManufacturedCase) -> np.ndarray:
        H, F, Ht, Ft = assemble_rhs(self.ctx, case)
        rho_zero = np.zeros(self.layouts[ROTATION].ndof)
        return np.concatenate([H, F, rho_zero, -Ht, -Ft])

    def residual(self, X: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Nonlinear residual of the (negated-row) system at state X."""
        parts = self.split(X)
        M = self.matrix(parts[STRESS], parts[PRESSURE])
        return M @ X - rhs

    def essential(self, case: ManufacturedCase):
        return essential_values(self.ctx, case)


def eliminate(matrix: sps.csr_matrix, rhs: np.ndarray, idx: np.ndarray,
              vals: np.ndarray):
    """Symmetric elimination of prescribed DOFs.

    Rows/columns are replaced by identity, the prescribed values move to
    the right-hand side; symmetry of a symmetric input is preserved.
    """
    n = matrix.shape[0]
    if idx.size == 0:
        return matrix.tocsr(), rhs.copy()
    keep = np.ones(n)
    keep[idx] = 0.0
    P = sps.diags(keep)
    lift = np.zeros(n)
    lift[idx] = vals
    rhs2 = keep * (rhs - matrix @ lift)
    rhs2[idx] = vals
    ones = np.zeros(n)
    ones[idx] = 1.0
    A2 = (P @ matrix @ P + sps.diags(ones)).tocsr()
    return A2, rhs2


def assemble_monolithic(mesh: TriMesh, params: ParameterSet,
                        case: ManufacturedCase, sigma_coef=None, p_coef=None,
                        newton_state=None) -> SparseSystem:
    """Full system at a linearisation state (Picard by default)."""
    disc = Discretization(mesh, params)
    if sigma_coef is None:
        sigma_coef = np.zeros(disc.layouts[STRESS].ndof)
    if p_coef is None:
        p_coef = np.zeros(disc.layouts[PRESSURE].ndof)
    M = disc.matrix(sigma_coef, p_coef, newton_state=newton_state)
    rhs = disc.rhs(case)
    idx, vals = disc.essential(case)
    return SparseSystem(M, rhs, disc.offsets, idx, vals)


def apply_essential_bc(system: SparseSystem) -> SparseSystem:
    M, rhs = eliminate(system.matrix, system.rhs, system.essential_idx,
                       system.essential_val)
    return SparseSystem(M, rhs, system.offsets, system.essential_idx,
                        system.essential_val)
