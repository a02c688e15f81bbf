"""Quadrature rules, local bases, and global DOF layouts (lowest order).

Discrete spaces:

* stress: PEERS_0, per row two Raviart-Thomas edge functions shared across
  cells plus one cell-local curl-bubble; 2*E + 2*C degrees of freedom
* displacement: piecewise-constant vectors, 2*C
* rotation: continuous P1 scalar (single entry of the skew tensor), V
* flux: RT_0, one normal moment per edge, E
* pressure: piecewise constants, C

Edge DOFs of H(div) fields follow the global edge orientation of the mesh;
per-cell sign flips are recorded in the layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import GAMMA_N, TriMesh

STRESS = "stress"
DISPLACEMENT = "displacement"
ROTATION = "rotation"
FLUX = "flux"
PRESSURE = "pressure"

FIELDS = (STRESS, DISPLACEMENT, ROTATION, FLUX, PRESSURE)

BUBBLE_SCALE = 27.0  # cubic bubble normalised to peak value 1 at the centroid


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle (0,0), (1,0), (0,1)."""

    degree: int
    bary: np.ndarray     # (Q, 3) barycentric coordinates
    weights: np.ndarray  # (Q,), sums to the reference area 1/2


def triangle_quadrature(degree: int) -> QuadratureRule:
    """Tensor Gauss rule (Duffy collapse), exact for total degree."""
    if not 1 <= degree <= 10:
        raise ValueError(f"unsupported quadrature degree {degree}")
    n = (degree + 2) // 2
    xu, wu = roots_legendre(n)
    xu = 0.5 * (xu + 1.0)
    wu = 0.5 * wu
    xv, wv = roots_jacobi(n, 1.0, 0.0)     # weight (1 - x) on [-1, 1]
    xv = 0.5 * (xv + 1.0)
    wv = 0.25 * wv
    u, v = np.meshgrid(xu, xv, indexing="ij")
    x = (u * (1.0 - v)).ravel()
    y = v.ravel()
    w = np.outer(wu, wv).ravel()
    bary = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(degree, bary, w)


def quadrature(degree: int) -> QuadratureRule:
    return triangle_quadrature(degree)


def edge_quadrature(degree: int):
    """Gauss points and weights on [0, 1], exact to the given degree."""
    n = degree // 2 + 1
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


# -- geometry cache -----------------------------------------------------------

class CellGeometry:
    """Per-cell geometric quantities shared by assembly and estimation."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        v = mesh.cell_coords()                      # (C, 3, 2)
        self.coords = v
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        self.area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        e = np.stack([v[:, 2] - v[:, 1], v[:, 0] - v[:, 2], v[:, 1] - v[:, 0]],
                     axis=1)                        # edge opposite vertex j
        self.edge_vec = e
        self.edge_len = np.linalg.norm(e, axis=2)
        # grad(lambda_j) = perp(v_{j+2} - v_{j+1}) / (2A), perp(x, y) = (-y, x)
        rot = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        self.grad_lambda = rot / (2.0 * self.area)[:, None, None]
        self.signs = mesh.cell_edge_signs.astype(float)
        self.diam = mesh.cell_diameters()
        self.centroid = v.mean(axis=1)

    def physical_points(self, bary: np.ndarray) -> np.ndarray:
        """Map barycentric points (Q, 3) to physical points (C, Q, 2)."""
        return np.einsum("qi,cix->cqx", bary, self.coords)

    def barycentric(self, cells: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of physical points.

        ``cells`` is (M,), ``pts`` is (M, P, 2); returns (M, P, 3).
        """
        g = self.grad_lambda[cells]                 # (M, 3, 2)
        v0 = self.coords[cells][:, :, :]            # (M, 3, 2)
        # lambda_j(x) = lambda_j(v0) + grad . (x - v0); use vertex 0 anchor
        anchor = v0[:, 0, :][:, None, :]            # (M, 1, 2)
        rel = pts - anchor
        lam = np.einsum("mjx,mpx->mpj", g, rel)
        lam[..., 0] += 1.0
        return lam


# -- local basis evaluation ---------------------------------------------------

def rt0_values(geo: CellGeometry, bary: np.ndarray):
    """RT0 basis values and divergences at barycentric points.

    Returns ``(vals, divs)`` with shapes (C, Q, 3, 2) and (C, 3); the basis
    function of local edge j has unit normal trace on that edge (so its
    normal moment is the edge length) with the global orientation sign,
    and divergence |E|/|K|.  The matching degree of freedom is the mean
    normal component over the edge.
    """
    x = np.einsum("qi,cix->cqx", bary, geo.coords)       # (C, Q, 2)
    coef = geo.signs * geo.edge_len / (2.0 * geo.area[:, None])   # (C, 3)
    vals = coef[:, None, :, None] * (x[:, :, None, :] - geo.coords[:, None, :, :])
    divs = 2.0 * coef
    return vals, divs


def rt0_at_points(geo: CellGeometry, cells, pts):
    """RT0 values at physical points; cells (M,), pts (M, P, 2)."""
    coords = geo.coords[cells]                           # (M, 3, 2)
    coef = (geo.signs[cells] * geo.edge_len[cells]
            / (2.0 * geo.area[cells, None]))             # (M, 3)
    vals = coef[:, None, :, None] * (pts[:, :, None, :] - coords[:, None, :, :])
    divs = 2.0 * coef
    return vals, divs


def bubble_values(geo: CellGeometry, bary: np.ndarray, cells=None):
    """curl of the normalised cubic bubble and its Jacobian.

    Returns ``(vals, grads)`` with shapes (C, Q, 2) and (C, Q, 2, 2) where
    ``grads[..., i, k]`` is the k-derivative of component i.
    """
    if cells is None:
        g = geo.grad_lambda                              # (C, 3, 2)
    else:
        g = geo.grad_lambda[cells]
    lam = bary                                           # (Q, 3) or (M, P, 3)
    if lam.ndim == 2:
        lam = np.broadcast_to(lam, g.shape[:1] + lam.shape)
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    # expand constant gradients along the point axis
    g0 = g[..., 0, :][..., None, :]
    g1 = g[..., 1, :][..., None, :]
    g2 = g[..., 2, :][..., None, :]
    grad_b = BUBBLE_SCALE * ((l1 * l2)[..., None] * g0
                             + (l0 * l2)[..., None] * g1
                             + (l0 * l1)[..., None] * g2)
    curl = np.stack([grad_b[..., 1], -grad_b[..., 0]], axis=-1)
    # Hessian of b; constant gradients so only cross terms survive
    def outer_sym(ga, gb):
        return np.einsum("...i,...j->...ij", ga, gb) + \
            np.einsum("...i,...j->...ij", gb, ga)
    hess = BUBBLE_SCALE * (l2[..., None, None] * outer_sym(g0, g1)
                           + l1[..., None, None] * outer_sym(g0, g2)
                           + l0[..., None, None] * outer_sym(g1, g2))
    # grad of curl(b): row 0 = grad(b_y), row 1 = -grad(b_x)
    grads = np.stack([hess[..., 1, :], -hess[..., 0, :]], axis=-2)
    return curl, grads


def p1_values(geo: CellGeometry, bary: np.ndarray):
    """Hat-function values (Q, 3) and constant gradients (C, 3, 2)."""
    return bary, geo.grad_lambda


# -- single-point basis evaluation ---------------------------------------------

def _single_cell_geo(mesh: TriMesh, cell: int) -> CellGeometry:
    geo = CellGeometry(mesh)
    if geo.area[cell] <= 1e-300:
        raise ValueError(f"cell {cell} is degenerate (zero area)")
    return geo

def eval_rt0_basis(mesh: TriMesh, cell: int, point):
    """RT0 basis values (3, 2) and divergences (3,) at one point."""
    geo = _single_cell_geo(mesh, cell)
    pts = np.asarray(point, dtype=float).reshape(1, 1, 2)
    vals, divs = rt0_at_points(geo, np.array([cell]), pts)
    return vals[0, 0], divs[0]


def eval_bubble_basis(mesh: TriMesh, cell: int, point):
    """curl(b_K) value (2,) and its Jacobian (2, 2) at one point."""
    geo = _single_cell_geo(mesh, cell)
    pts = np.asarray(point, dtype=float).reshape(1, 1, 2)
    bary = geo.barycentric(np.array([cell]), pts)
    vals, grads = bubble_values(geo, bary, cells=np.array([cell]))
    return vals[0, 0], grads[0, 0]


def eval_p1_basis(mesh: TriMesh, cell: int, point):
    """Hat values (3,) and gradients (3, 2) at one point."""
    geo = _single_cell_geo(mesh, cell)
    pts = np.asarray(point, dtype=float).reshape(1, 1, 2)
    bary = geo.barycentric(np.array([cell]), pts)
    return bary[0, 0], geo.grad_lambda[cell]


def eval_p0_basis(mesh: TriMesh, cell: int):
    return 1.0


# -- degree-of-freedom layouts ------------------------------------------------

@dataclass
class DofLayout:
    field: str
    ndof: int
    cell_dofs: np.ndarray            # (C, k) global indices
    signs: np.ndarray | None = None  # (C, k) orientation signs for H(div)
    gamma_n_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, int))


def build_layout(mesh: TriMesh, which: str, degree: int = 0) -> DofLayout:
    """Global DOF layout for one of the five fields at lowest order."""
    if degree != 0:
        raise NotImplementedError("only the lowest-order family is built")
    C, E, V = mesh.num_cells, mesh.num_edges, mesh.num_vertices
    gn_edges = mesh.boundary_edges(GAMMA_N)
    cidx = np.arange(C)

    if which == STRESS:
        # [row0 edge dofs | row1 edge dofs | per-cell bubbles (row0, row1)]
        cell_dofs = np.empty((C, 8), dtype=np.int64)
        signs = np.ones((C, 8))
        for r in range(2):
            cell_dofs[:, 4 * r:4 * r + 3] = r * E + mesh.cell_edges
            cell_dofs[:, 4 * r + 3] = 2 * E + 2 * cidx + r
            signs[:, 4 * r:4 * r + 3] = mesh.cell_edge_signs
        gn = np.concatenate([r * E + gn_edges for r in range(2)])
        return DofLayout(STRESS, 2 * E + 2 * C, cell_dofs, signs, np.sort(gn))
    if which == DISPLACEMENT:
        cell_dofs = np.column_stack([2 * cidx, 2 * cidx + 1])
        return DofLayout(DISPLACEMENT, 2 * C, cell_dofs)
    if which == ROTATION:
        return DofLayout(ROTATION, V, mesh.cells.copy())
    if which == FLUX:
        return DofLayout(FLUX, E, mesh.cell_edges.copy(),
                         mesh.cell_edge_signs.astype(float),
                         np.sort(gn_edges.copy()))
    if which == PRESSURE:
        return DofLayout(PRESSURE, C, cidx[:, None].copy())
    raise ValueError(f"unknown field {which!r}")


def build_layouts(mesh: TriMesh) -> dict:
    return {f: build_layout(mesh, f) for f in FIELDS}


def total_dofs(layouts: dict) -> int:
    return sum(layouts[f].ndof for f in FIELDS)
