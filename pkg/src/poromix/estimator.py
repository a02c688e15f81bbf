"""Residual a posteriori error indicators, marking, and the adaptive loop.

Per-cell indicators split into a solid part (momentum/constitutive
residuals of the elasticity rows) and a fluid part (mass/Darcy residuals).
Interior-edge jump terms are shared half-and-half between the two incident
cells so the global estimator is attribution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import physics, postproc, solver, spaces
from .assembly import Discretization
from .mesh import (GAMMA_D, INTERIOR, TriMesh, bisect_refine_with_parents)
from .physics import ManufacturedCase
from .postproc import CellSampler
from .spaces import CellGeometry

ESTIMATOR_DEGREE = 6
EDGE_DEGREE = 6

SOLID_TERMS = ("equilibrium", "asymmetry", "constitutive", "curl",
               "displacement_trace", "tangential_jump", "tangential_trace")
FLUID_TERMS = ("mass", "darcy", "rot", "tangential_jump",
               "tangential_trace", "pressure_trace")


class EstimatorError(Exception):
    """Inconsistent estimator input."""


@dataclass(frozen=True)
class MarkingConfig:
    zeta: float = 9.5e-5

    def __post_init__(self):
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError("bulk density zeta must lie in (0, 1]")


@dataclass
class EstimatorReport:
    solid_sq: np.ndarray
    fluid_sq: np.ndarray
    solid_terms: dict
    fluid_terms: dict

    @property
    def cell_sq(self) -> np.ndarray:
        return self.solid_sq + self.fluid_sq

    @property
    def xi(self) -> float:
        return float(np.sqrt(self.cell_sq.sum()))


def _tensor_R(params, sig, p_cells, rho_vals):
    """C^{-1} sigma_h + alpha/(d lam + 2 mu) p_h I + rho_h at points.

    ``sig`` is (..., 2, 2), ``p_cells`` broadcastable to the point shape,
    ``rho_vals`` the scalar rotation values.
    """
    R = physics.hooke_inv(sig, params)
    scale = params.alpha / params.dlam2mu
    for r in range(2):
        R[..., r, r] += scale * p_cells
    R[..., 0, 1] += rho_vals
    R[..., 1, 0] -= rho_vals
    return R


class _EdgeSampler:
    """Traces of the discrete fields on edges, from a chosen side."""

    def __init__(self, mesh: TriMesh, layouts: dict, geo: CellGeometry):
        self.mesh = mesh
        self.layouts = layouts
        self.geo = geo
        xg, wg = spaces.edge_quadrature(EDGE_DEGREE)
        p = mesh.vertices[mesh.edges]                     # (E, 2, 2)
        self.points = (p[:, 0, None, :]
                       + xg[None, :, None] * (p[:, 1] - p[:, 0])[:, None, :])
        self.length = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        self.weights = wg[None, :] * self.length[:, None]  # (E, G)
        n = mesh.edge_normals()
        self.tangent = np.stack([-n[:, 1], n[:, 0]], axis=1)

    def side(self, edges: np.ndarray, which: int):
        cells = self.mesh.edge_cells[edges, which]
        pts = self.points[edges]
        bary = self.geo.barycentric(cells, pts)
        return cells, pts, bary

    def stress(self, solution, cells, pts, bary):
        coefs = solution.sigma[self.layouts[spaces.STRESS].cell_dofs[cells]]
        rt, _ = spaces.rt0_at_points(self.geo, cells, pts)
        bub, _ = spaces.bubble_values(self.geo, bary, cells=cells)
        rows = [np.einsum("ea,egax->egx", coefs[:, 4 * r:4 * r + 3], rt)
                + coefs[:, 4 * r + 3, None, None] * bub for r in range(2)]
        return np.stack(rows, axis=2)                     # (Ed, G, 2, 2)

    def flux(self, solution, cells, pts):
        coefs = solution.phi[self.layouts[spaces.FLUX].cell_dofs[cells]]
        rt, _ = spaces.rt0_at_points(self.geo, cells, pts)
        return np.einsum("ea,egax->egx", coefs, rt)

    def rotation(self, solution, cells, bary):
        rv = solution.rho[self.mesh.cells[cells]]
        return np.einsum("egi,ei->eg", bary, rv)


def estimate(solution, case: ManufacturedCase) -> EstimatorReport:
    solid_sq, solid_terms = estimate_solid(solution, case)
    fluid_sq, fluid_terms = estimate_fluid(solution, case)
    return EstimatorReport(solid_sq, fluid_sq, solid_terms, fluid_terms)


def estimate_solid(solution, case: ManufacturedCase):
    """Per-cell squared solid indicators and the per-term breakdown."""
    mesh = solution.mesh
    pr = case.params
    s = CellSampler(mesh, solution.layouts, ESTIMATOR_DEGREE)
    x, y = s.points[..., 0], s.points[..., 1]
    w = s.weights
    hK2 = s.geo.diam ** 2
    terms = {}

    sig = s.stress(solution.sigma)
    res = case.f(x, y) + s.stress_div(solution.sigma)[:, None, :]
    terms["equilibrium"] = (w[..., None] * res ** 2).sum(axis=(1, 2))

    skew = sig[..., 0, 1] - sig[..., 1, 0]
    terms["asymmetry"] = 2.0 * (w * skew ** 2).sum(axis=1)

    rho_vals = s.rotation(solution.rho)
    R = _tensor_R(pr, sig, s.pressure(solution.p), rho_vals)
    terms["constitutive"] = hK2 * (w[..., None, None] * R ** 2).sum(
        axis=(1, 2, 3))

    tr_grad = s.stress_trace_grad(solution.sigma)         # (C, Q, 2)
    curl_sig = s.stress_row_curls(solution.sigma)         # (C, Q, 2)
    lam_fac = pr.lam / (2.0 * pr.mu * pr.dlam2mu)
    curl_R = curl_sig / (2.0 * pr.mu)
    curl_R[..., 0] -= lam_fac * (-tr_grad[..., 1])
    curl_R[..., 1] -= lam_fac * tr_grad[..., 0]
    curl_R += s.rotation_grad(solution.rho)[:, None, :]
    terms["curl"] = hK2 * (w[..., None] * curl_R ** 2).sum(axis=(1, 2))

    jump, trace_u, trace_t = _solid_edge_terms(solution, case)
    terms["displacement_trace"] = trace_u
    terms["tangential_jump"] = jump
    terms["tangential_trace"] = trace_t

    total = sum(terms.values())
    return total, terms


def _solid_edge_terms(solution, case):
    mesh = solution.mesh
    pr = case.params
    geo = CellGeometry(mesh)
    es = _EdgeSampler(mesh, solution.layouts, geo)
    C = mesh.num_cells
    jump = np.zeros(C)
    trace_u = np.zeros(C)
    trace_t = np.zeros(C)

    def R_dot_s(edges, which):
        cells, pts, bary = es.side(edges, which)
        sig = es.stress(solution, cells, pts, bary)
        rho_vals = es.rotation(solution, cells, bary)
        R = _tensor_R(pr, sig, solution.p[cells][:, None], rho_vals)
        sv = es.tangent[edges]
        return cells, np.einsum("egrj,ej->egr", R, sv)

    interior = np.flatnonzero(mesh.edge_tags == INTERIOR)
    if interior.size:
        c0, Rs0 = R_dot_s(interior, 0)
        c1, Rs1 = R_dot_s(interior, 1)
        val = es.length[interior] * np.einsum(
            "eg,egr->e", es.weights[interior], (Rs0 - Rs1) ** 2)
        np.add.at(jump, c0, 0.5 * val)
        np.add.at(jump, c1, 0.5 * val)

    dirichlet = mesh.boundary_edges(GAMMA_D)
    if dirichlet.size:
        cells, Rs = R_dot_s(dirichlet, 0)
        pts = es.points[dirichlet]
        uD = case.u_dirichlet(pts[..., 0], pts[..., 1])
        uh = solution.u[solution.layouts[spaces.DISPLACEMENT]
                        .cell_dofs[cells]]
        val = es.length[dirichlet] * np.einsum(
            "eg,egr->e", es.weights[dirichlet],
            (uD - uh[:, None, :]) ** 2)
        np.add.at(trace_u, cells, val)
        duD = case.du_dirichlet_ds(pts[..., 0], pts[..., 1],
                                   es.tangent[dirichlet][:, None, :])
        val = es.length[dirichlet] * np.einsum(
            "eg,egr->e", es.weights[dirichlet], (Rs - duD) ** 2)
        np.add.at(trace_t, cells, val)
    return jump, trace_u, trace_t


def estimate_fluid(solution, case: ManufacturedCase):
    """Per-cell squared fluid indicators and the per-term breakdown."""
    mesh = solution.mesh
    pr = case.params
    s = CellSampler(mesh, solution.layouts, ESTIMATOR_DEGREE)
    x, y = s.points[..., 0], s.points[..., 1]
    w = s.weights
    hK2 = s.geo.diam ** 2
    terms = {}

    trs = np.trace(s.stress(solution.sigma), axis1=-2, axis2=-1)
    ph = s.pressure(solution.p)
    res = (physics.gamma_tilde(pr) * ph
           + pr.alpha / pr.dlam2mu * trs
           - s.flux_div(solution.phi)[:, None] - case.g(x, y))
    terms["mass"] = (w * res ** 2).sum(axis=1)

    kinv = physics.kappa_inv(trs, ph, pr)
    phi = s.flux(solution.phi)
    terms["darcy"] = hK2 * (w[..., None] * (kinv[..., None] * phi) ** 2).sum(
        axis=(1, 2))

    # rot(kinv * phi_h): RT0 fields are rot free, kinv varies through tr(sigma)
    d_tr, _ = physics.kappa_inv_derivatives(trs, ph, pr)
    grad_kinv = d_tr[..., None] * s.stress_trace_grad(solution.sigma)
    rot = grad_kinv[..., 0] * phi[..., 1] - grad_kinv[..., 1] * phi[..., 0]
    terms["rot"] = hK2 * (w * rot ** 2).sum(axis=1)

    jump, trace_t, trace_p = _fluid_edge_terms(solution, case)
    terms["tangential_jump"] = jump
    terms["tangential_trace"] = trace_t
    terms["pressure_trace"] = trace_p

    total = sum(terms.values())
    return total, terms


def _fluid_edge_terms(solution, case):
    mesh = solution.mesh
    pr = case.params
    geo = CellGeometry(mesh)
    es = _EdgeSampler(mesh, solution.layouts, geo)
    C = mesh.num_cells
    jump = np.zeros(C)
    trace_t = np.zeros(C)
    trace_p = np.zeros(C)

    def kinv_phi_dot_s(edges, which):
        cells, pts, bary = es.side(edges, which)
        sig = es.stress(solution, cells, pts, bary)
        trs = np.trace(sig, axis1=-2, axis2=-1)
        kinv = physics.kappa_inv(trs, solution.p[cells][:, None], pr)
        phi = es.flux(solution, cells, pts)
        return cells, kinv * np.einsum("egx,ex->eg", phi, es.tangent[edges])

    interior = np.flatnonzero(mesh.edge_tags == INTERIOR)
    if interior.size:
        c0, t0 = kinv_phi_dot_s(interior, 0)
        c1, t1 = kinv_phi_dot_s(interior, 1)
        val = es.length[interior] * (es.weights[interior]
                                     * (t0 - t1) ** 2).sum(axis=1)
        np.add.at(jump, c0, 0.5 * val)
        np.add.at(jump, c1, 0.5 * val)

    dirichlet = mesh.boundary_edges(GAMMA_D)
    if dirichlet.size:
        cells, t0 = kinv_phi_dot_s(dirichlet, 0)
        pts = es.points[dirichlet]
        dpD = case.dp_dirichlet_ds(pts[..., 0], pts[..., 1],
                                   es.tangent[dirichlet][:, None, :])
        val = es.length[dirichlet] * (es.weights[dirichlet]
                                      * (t0 - dpD) ** 2).sum(axis=1)
        np.add.at(trace_t, cells, val)
        pD = case.p_dirichlet(pts[..., 0], pts[..., 1])
        val = es.length[dirichlet] * (es.weights[dirichlet]
                                      * (pD - solution.p[cells][:, None]) ** 2
                                      ).sum(axis=1)
        np.add.at(trace_p, cells, val)
    return jump, trace_t, trace_p


def dorfler_mark(indicators: np.ndarray, config: MarkingConfig) -> np.ndarray:
    """Smallest cell set carrying the bulk fraction, greedily.

    Cells are taken in decreasing indicator order (ties by lower index)
    until the marked sum reaches zeta times the total.
    """
    ind = np.asarray(indicators, dtype=float)
    if ind.size == 0:
        raise EstimatorError("empty indicator list")
    order = np.argsort(-ind, kind="stable")
    csum = np.cumsum(ind[order])
    target = config.zeta * csum[-1]
    k = int(np.searchsorted(csum, target - 1e-14 * max(csum[-1], 1.0)) + 1)
    k = min(k, ind.size)
    return np.sort(order[:k])


def efficiency_index(error_total: float, xi: float) -> float:
    if xi <= 0.0:
        if error_total > 0.0:
            raise EstimatorError("zero estimator with nonzero error")
        return float("nan")
    return error_total / xi


STRONG_BULK = 0.5  # error-mass fraction whose carriers get two bisections


def _refine_marked(mesh: TriMesh, marked: np.ndarray,
                   strong: np.ndarray | None = None) -> TriMesh:
    """Bisect the marked cells once; bisect the strong subset a second
    time so those cells have their diameters halved."""
    refined, parents = bisect_refine_with_parents(mesh, marked)
    if strong is None:
        strong = marked
    in_strong = np.zeros(mesh.num_cells, dtype=bool)
    in_strong[strong] = True
    second = np.flatnonzero(in_strong[parents])
    refined, _ = bisect_refine_with_parents(refined, second)
    return refined


def adaptive_loop(case: ManufacturedCase, mesh: TriMesh, levels: int,
                  marking: MarkingConfig,
                  solver_config: solver.SolverConfig | None = None,
                  error_mode: str = postproc.PROJECTED_DIV) -> list:
    """Solve / estimate / mark / refine; returns the per-level history.

    Marking unions the greedy bulk set with every cell whose own indicator
    reaches the bulk fraction of the total, so the marked set always
    satisfies the bulk inequality while refining aggressively at small
    bulk densities.  Refinement is graded: every marked cell is bisected
    once, and the cells carrying the leading half of the estimated error
    mass (or the zeta fraction, if larger) are bisected twice.
    """
    if levels < 1:
        raise ValueError("levels must be at least 1")
    history = []
    for level in range(levels):
        try:
            disc = Discretization(mesh, case.params)
            sol = solver.solve(mesh, case, solver_config, disc=disc)
        except solver.SolverError as exc:
            raise solver.SolverError(
                f"adaptive level {level}: {exc}") from exc
        report = estimate(sol, case)
        errors = postproc.compute_errors(sol, case, mode=error_mode)
        history.append({"mesh": mesh, "solution": sol, "report": report,
                        "errors": errors, "level": level})
        if level + 1 < levels:
            cell_sq = report.cell_sq
            greedy = dorfler_mark(cell_sq, marking)
            above = np.flatnonzero(cell_sq >= marking.zeta * cell_sq.sum())
            marked = np.union1d(greedy, above)
            strong_bulk = MarkingConfig(max(marking.zeta, STRONG_BULK))
            strong = np.intersect1d(marked, dorfler_mark(cell_sq, strong_bulk))
            mesh = _refine_marked(mesh, marked, strong)
    return history
