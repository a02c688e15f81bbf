"""Error norms, convergence rates, conservation metrics, CSV/VTK output.

Errors are measured in the natural norms: H(div) for stress and flux, L2
for displacement, rotation and pressure.  The divergence part of the
H(div) errors can be taken against the closed-form data (Analytic) or as
the piecewise-constant projection of the discrete residual (ProjectedDiv),
which avoids integrating singular exact divergences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import physics, spaces
from .assembly import ElementContext
from .mesh import GAMMA_D, TriMesh, mesh_size
from .physics import ManufacturedCase
from .spaces import (CellGeometry, DISPLACEMENT, FIELDS, FLUX, PRESSURE,
                     ROTATION, STRESS)

ANALYTIC = "analytic"
PROJECTED_DIV = "projected_div"

ERROR_DEGREE = 8

CSV_COLUMNS = ["level", "dofs", "h", "e_sigma", "rate_sigma", "e_u",
               "rate_u", "e_rho", "rate_rho", "e_phi", "rate_phi", "e_p",
               "rate_p", "e_total", "rate_total", "equ_h", "mass_h",
               "newton_iters", "xi", "eff"]


def _subdivided_rule(quad: spaces.QuadratureRule):
    """One red split of the reference rule (4x points, weights / 4)."""
    v0, v1, v2 = np.eye(3)
    m01, m12, m02 = (v0 + v1) / 2, (v1 + v2) / 2, (v0 + v2) / 2
    subs = [(v0, m01, m02), (m01, v1, m12), (m02, m12, v2), (m01, m12, m02)]
    bary = np.concatenate([quad.bary @ np.stack(s) for s in subs])
    weights = np.tile(quad.weights / 4.0, 4)
    return bary, weights


class CellSampler:
    """Evaluates the five discrete fields at cell quadrature points."""

    def __init__(self, mesh: TriMesh, layouts: dict, degree: int = ERROR_DEGREE,
                 cells: np.ndarray | None = None, subdivide: bool = False,
                 bary: np.ndarray | None = None,
                 weights: np.ndarray | None = None):
        self.mesh = mesh
        self.layouts = layouts
        self.geo = CellGeometry(mesh)
        if bary is not None:
            self.bary, self.wref = bary, weights
        else:
            quad = spaces.triangle_quadrature(degree)
            if subdivide:
                self.bary, self.wref = _subdivided_rule(quad)
            else:
                self.bary, self.wref = quad.bary, quad.weights
        self.cells = np.arange(mesh.num_cells) if cells is None else cells
        geo = self.geo
        coords = geo.coords[self.cells]                     # (N, 3, 2)
        self.points = np.einsum("qi,nix->nqx", self.bary, coords)
        self.weights = 2.0 * geo.area[self.cells, None] * self.wref[None, :]
        self.rt_vals, self.rt_div = spaces.rt0_at_points(geo, self.cells,
                                                         self.points)
        self.bub_vals, self.bub_grads = spaces.bubble_values(
            geo, self.bary, cells=self.cells)

    def pressure(self, p_coef):
        return np.broadcast_to(p_coef[self.cells][:, None],
                               self.weights.shape)

    def displacement(self, u_coef):
        uh = u_coef[self.layouts[DISPLACEMENT].cell_dofs[self.cells]]
        return np.broadcast_to(uh[:, None, :], self.weights.shape + (2,))

    def rotation(self, rho_coef):
        rv = rho_coef[self.mesh.cells[self.cells]]          # (N, 3)
        return np.einsum("qi,ni->nq", self.bary, rv)

    def rotation_grad(self, rho_coef):
        rv = rho_coef[self.mesh.cells[self.cells]]
        return np.einsum("ni,nix->nx", rv, self.geo.grad_lambda[self.cells])

    def flux(self, phi_coef):
        coefs = phi_coef[self.layouts[FLUX].cell_dofs[self.cells]]
        return np.einsum("na,nqax->nqx", coefs, self.rt_vals)

    def flux_div(self, phi_coef):
        coefs = phi_coef[self.layouts[FLUX].cell_dofs[self.cells]]
        return np.einsum("na,na->n", coefs, self.rt_div)

    def stress(self, sigma_coef):
        """Stress tensor values (N, Q, 2, 2)."""
        coefs = sigma_coef[self.layouts[STRESS].cell_dofs[self.cells]]
        rows = []
        for r in range(2):
            row = (np.einsum("na,nqax->nqx", coefs[:, 4 * r:4 * r + 3],
                             self.rt_vals)
                   + coefs[:, 4 * r + 3, None, None] * self.bub_vals)
            rows.append(row)
        return np.stack(rows, axis=2)

    def stress_div(self, sigma_coef):
        """Cellwise-constant divergence rows (N, 2); bubbles are div-free."""
        coefs = sigma_coef[self.layouts[STRESS].cell_dofs[self.cells]]
        return np.stack(
            [np.einsum("na,na->n", coefs[:, 4 * r:4 * r + 3], self.rt_div)
             for r in range(2)], axis=1)

    def stress_trace_grad(self, sigma_coef):
        """Gradient of tr(sigma_h) at the quadrature points (N, Q, 2)."""
        coefs = sigma_coef[self.layouts[STRESS].cell_dofs[self.cells]]
        geo = self.geo
        coef_rt = (geo.signs * geo.edge_len
                   / (2.0 * geo.area[:, None]))[self.cells]  # (N, 3)
        out = np.zeros(self.weights.shape + (2,))
        for r in range(2):
            # edge basis row r is c*(x - p): d(tr)/dx_r = c
            out[..., r] += (coefs[:, 4 * r:4 * r + 3]
                            * coef_rt).sum(axis=1)[:, None]
            # bubble row r contributes (curl b)_r to the trace
            out += coefs[:, 4 * r + 3, None, None] * self.bub_grads[:, :, r, :]
        return out

    def stress_row_curls(self, sigma_coef):
        """curl of each stress row (N, Q, 2); only bubbles contribute."""
        coefs = sigma_coef[self.layouts[STRESS].cell_dofs[self.cells]]
        g = self.bub_grads
        curl_of_curl = g[:, :, 1, 0] - g[:, :, 0, 1]        # = -laplacian(b)
        return np.stack([coefs[:, 4 * r + 3, None] * curl_of_curl
                         for r in range(2)], axis=2)


def _rt0_divs(geo: CellGeometry) -> np.ndarray:
    return geo.signs * geo.edge_len / geo.area[:, None]


@dataclass
class ErrorReport:
    e_sigma: float
    e_u: float
    e_rho: float
    e_phi: float
    e_p: float
    dofs: int
    h: float

    @property
    def e_total(self) -> float:
        return self.e_sigma + self.e_u + self.e_rho + self.e_phi + self.e_p

    def as_dict(self) -> dict:
        return {"e_sigma": self.e_sigma, "e_u": self.e_u, "e_rho": self.e_rho,
                "e_phi": self.e_phi, "e_p": self.e_p,
                "e_total": self.e_total, "dofs": self.dofs, "h": self.h}


def _corner_cells(mesh: TriMesh, corner) -> np.ndarray:
    if corner is None:
        return np.zeros(0, dtype=np.int64)
    d = np.linalg.norm(mesh.vertices[mesh.cells] - np.asarray(corner),
                       axis=2)
    return np.flatnonzero((d < 1e-12).any(axis=1))


def compute_errors(solution, case: ManufacturedCase, mode: str = ANALYTIC,
                   degree: int = ERROR_DEGREE) -> ErrorReport:
    """Field errors in their natural norms against the closed forms."""
    if mode not in (ANALYTIC, PROJECTED_DIV):
        raise ValueError(f"unknown error mode {mode!r}")
    mesh = solution.mesh
    layouts = solution.layouts
    corner = _corner_cells(mesh, case.singular_corner)
    plain = np.setdiff1d(np.arange(mesh.num_cells), corner)
    acc = np.zeros(7)  # sigma L2, sigma div, u, rho, phi L2, phi div, p
    for cells, subdivide in ((plain, False), (corner, True)):
        if cells.size == 0:
            continue
        s = CellSampler(mesh, layouts, degree, cells=cells,
                        subdivide=subdivide)
        acc += _error_integrals(s, solution, case, mode)
    e_sigma = math.sqrt(acc[0] + acc[1])
    e_phi = math.sqrt(acc[4] + acc[5])
    return ErrorReport(e_sigma, math.sqrt(acc[2]), math.sqrt(acc[3]),
                       e_phi, math.sqrt(acc[6]),
                       spaces.total_dofs(layouts), mesh_size(mesh))


def _error_integrals(s: CellSampler, solution, case, mode):
    x, y = s.points[..., 0], s.points[..., 1]
    w = s.weights
    out = np.zeros(7)

    ds = case.sigma(x, y) - s.stress(solution.sigma)
    out[0] = (w[..., None, None] * ds ** 2).sum()
    if mode == ANALYTIC:
        dd = case.div_sigma(x, y) - s.stress_div(solution.sigma)[:, None, :]
        out[1] = (w[..., None] * dd ** 2).sum()
        dphi = case.div_phi(x, y) - s.flux_div(solution.phi)[:, None]
        out[5] = (w * dphi ** 2).sum()
    else:
        # projection of (div sigma_h + f): div sigma_h is P0 already
        area = s.weights.sum(axis=1)
        proj = (s.stress_div(solution.sigma)
                + np.einsum("nq,nqx->nx", w, case.f(x, y)) / area[:, None])
        out[1] = (area[:, None] * proj ** 2).sum()
        mass = (physics.gamma_tilde(case.params) * solution.p[s.cells]
                + case.params.alpha / case.params.dlam2mu
                * np.einsum("nq,nq->n", w, np.trace(
                    s.stress(solution.sigma), axis1=-2, axis2=-1)) / area
                - s.flux_div(solution.phi)
                - np.einsum("nq,nq->n", w, case.g(x, y)) / area)
        out[5] = (area * mass ** 2).sum()

    du = case.u(x, y) - s.displacement(solution.u)
    out[2] = (w[..., None] * du ** 2).sum()
    dr = case.rho(x, y) - s.rotation(solution.rho)
    out[3] = 2.0 * (w * dr ** 2).sum()     # Frobenius norm of the skew tensor
    dphi = case.phi(x, y) - s.flux(solution.phi)
    out[4] = (w[..., None] * dphi ** 2).sum()
    dp = case.p(x, y) - s.pressure(solution.p)
    out[6] = (w * dp ** 2).sum()
    return out


def convergence_rates(history: list, dof_based: bool = False) -> list:
    """Per-level rate dicts; the first level carries undefined markers."""
    keys = ["e_sigma", "e_u", "e_rho", "e_phi", "e_p", "e_total"]
    rates = [{k.replace("e_", "rate_"): float("nan") for k in keys}]
    for prev, cur in zip(history, history[1:]):
        row = {}
        for k in keys:
            e0, e1 = prev[k], cur[k]
            if e0 <= 0 or e1 <= 0:
                row[k.replace("e_", "rate_")] = float("nan")
            elif dof_based:
                row[k.replace("e_", "rate_")] = (
                    -2.0 * math.log(e1 / e0)
                    / math.log(cur["dofs"] / prev["dofs"]))
            else:
                row[k.replace("e_", "rate_")] = (math.log(e1 / e0)
                                                 / math.log(cur["h"] / prev["h"]))
        rates.append(row)
    return rates


def conservation_metrics(solution, case: ManufacturedCase,
                         ctx: ElementContext | None = None):
    """Max-norm of the projected momentum and mass residuals.

    Projection integrals reuse the assembly quadrature rule, so a solved
    system satisfies both identities to rounding.
    """
    if ctx is None:
        ctx = ElementContext(solution.mesh, solution.layouts, case.params)
    geo = ctx.geo
    area = geo.area
    x, y = ctx.points[..., 0], ctx.points[..., 1]

    lay = solution.layouts[STRESS]
    coefs = solution.sigma[lay.cell_dofs]
    rt_div = _rt0_divs(geo)
    div_s = np.stack([np.einsum("ca,ca->c", coefs[:, 4 * r:4 * r + 3], rt_div)
                      for r in range(2)], axis=1)
    f_proj = np.einsum("cq,cqx->cx", ctx.weights, case.f(x, y)) / area[:, None]
    equ = np.abs(div_s + f_proj).max()

    pr = case.params
    tr_proj = np.einsum("cq,cq->c", ctx.weights,
                        ctx.stress_trace_at_qp(solution.sigma)) / area
    phi_div = np.einsum("ca,ca->c",
                        solution.phi[solution.layouts[FLUX].cell_dofs],
                        rt_div)
    g_proj = np.einsum("cq,cq->c", ctx.weights, case.g(x, y)) / area
    mass = np.abs(physics.gamma_tilde(pr) * solution.p
                  + pr.alpha / pr.dlam2mu * tr_proj - phi_div - g_proj).max()
    return float(equ), float(mass)


# -- serialisation --------------------------------------------------------------

def _fmt(key, value):
    if key in ("level", "dofs", "newton_iters"):
        return str(int(value))
    if key.startswith("rate_"):
        return "nan" if (isinstance(value, float) and math.isnan(value)) \
            else f"{value:.2f}"
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return f"{value:.17g}"


def format_table_row(row: dict) -> str:
    return ",".join(_fmt(k, row.get(k, float("nan"))) for k in CSV_COLUMNS)


def write_csv(history: list, path) -> None:
    """History rows (dicts keyed by CSV_COLUMNS) to a CSV file."""
    lines = [",".join(CSV_COLUMNS)]
    lines += [format_table_row(row) for row in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_vtk(solution, path, xi_cells: np.ndarray | None = None) -> None:
    """Legacy ASCII unstructured-grid file with cellwise field magnitudes."""
    mesh = solution.mesh
    layouts = solution.layouts
    bary = np.full((1, 3), 1.0 / 3.0)
    cen_s = CellSampler(mesh, layouts, bary=bary, weights=np.array([0.5]))

    u = solution.u[layouts[DISPLACEMENT].cell_dofs]
    u_mag = np.linalg.norm(u, axis=1)
    sig = cen_s.stress(solution.sigma)[:, 0]
    sig_mag = np.sqrt((sig ** 2).sum(axis=(1, 2)))
    phi_mag = np.linalg.norm(cen_s.flux(solution.phi)[:, 0], axis=1)
    rho_cell = solution.rho[mesh.cells].mean(axis=1)

    data = [("p_h", solution.p), ("u_mag", u_mag), ("sigma_mag", sig_mag),
            ("phi_mag", phi_mag), ("rho_h", rho_cell)]
    if xi_cells is not None:
        data.append(("xi", np.asarray(xi_cells)))

    lines = ["# vtk DataFile Version 3.0", "poroelasticity fields", "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.num_vertices} double"]
    lines += [f"{vx:.17g} {vy:.17g} 0" for vx, vy in mesh.vertices]
    C = mesh.num_cells
    lines.append(f"CELLS {C} {4 * C}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
    lines.append(f"CELL_TYPES {C}")
    lines += ["5"] * C
    lines.append(f"CELL_DATA {C}")
    for name, values in data:
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines += [f"{v:.17g}" for v in values]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
