"""Assembled blocks against a dense pointwise-basis quadrature oracle."""

import numpy as np
import pytest

from poromix import assembly, mesh as pm, physics, spaces
from poromix.spaces import (DISPLACEMENT, FLUX, PRESSURE, ROTATION, STRESS)

PARAMS = physics.ParameterSet()


def small_meshes():
    return [
        pm.unit_square_mesh(1),
        pm.bisect_refine(pm.unit_square_mesh(1), [0]),
        pm.unit_square_mesh(2),
    ]


class Oracle:
    """Entrywise form evaluation from the single-point basis API."""

    def __init__(self, mesh, params, degree=10):
        self.mesh = mesh
        self.params = params
        self.layouts = spaces.build_layouts(mesh)
        self.geo = spaces.CellGeometry(mesh)
        q = spaces.quadrature(degree)
        self.pts = self.geo.physical_points(q.bary)          # (C, Q, 2)
        self.w = 2.0 * self.geo.area[:, None] * q.weights[None, :]

    def stress_basis(self, cell, point):
        """The 8 local tensors, divergence vectors, in layout order."""
        rt, rtdiv = spaces.eval_rt0_basis(self.mesh, cell, point)
        bub, _ = spaces.eval_bubble_basis(self.mesh, cell, point)
        tensors, divs = [], []
        for r in range(2):
            for j in range(3):
                t = np.zeros((2, 2))
                t[r] = rt[j]
                d = np.zeros(2)
                d[r] = rtdiv[j]
                tensors.append(t)
                divs.append(d)
            t = np.zeros((2, 2))
            t[r] = bub
            tensors.append(t)
            divs.append(np.zeros(2))
        order = [0, 1, 2, 3, 4, 5, 6, 7]  # already (r0 e0..e2 b0, r1 ...)
        return [tensors[i] for i in order], [divs[i] for i in order]

    def flux_basis(self, cell, point):
        rt, rtdiv = spaces.eval_rt0_basis(self.mesh, cell, point)
        return rt, rtdiv

    def cellwise(self, form):
        """Accumulate form(cell, q-index, point, weight) over all cells."""
        C, Q = self.pts.shape[:2]
        for c in range(C):
            for q in range(Q):
                form(c, q, self.pts[c, q], self.w[c, q])

    def dense_a(self):
        pr = self.params
        dl = pr.dlam2mu
        lay = self.layouts[STRESS]
        A = np.zeros((lay.ndof, lay.ndof))

        def accumulate(c, q, p, w):
            tensors, _ = self.stress_basis(c, p)
            dofs = lay.cell_dofs[c]
            for a in range(8):
                ta = tensors[a]
                for b in range(8):
                    tb = tensors[b]
                    val = (ta * tb).sum() / (2 * pr.mu) \
                        - pr.lam / (2 * pr.mu * dl) * np.trace(ta) * np.trace(tb)
                    A[dofs[a], dofs[b]] += w * val

        self.cellwise(accumulate)
        return A

    def dense_b(self):
        lay_s = self.layouts[STRESS]
        lay_u = self.layouts[DISPLACEMENT]
        lay_r = self.layouts[ROTATION]
        B_u = np.zeros((lay_u.ndof, lay_s.ndof))
        B_rho = np.zeros((lay_r.ndof, lay_s.ndof))

        def accumulate(c, q, p, w):
            tensors, divs = self.stress_basis(c, p)
            hats, _ = spaces.eval_p1_basis(self.mesh, c, p)
            sd = lay_s.cell_dofs[c]
            ud = lay_u.cell_dofs[c]
            rd = lay_r.cell_dofs[c]
            for a in range(8):
                skew = tensors[a][0, 1] - tensors[a][1, 0]
                for comp in range(2):
                    B_u[ud[comp], sd[a]] += w * divs[a][comp]
                for i in range(3):
                    B_rho[rd[i], sd[a]] += w * hats[i] * skew

        self.cellwise(accumulate)
        return B_u, B_rho

    def dense_c(self):
        pr = self.params
        lay_s = self.layouts[STRESS]
        lay_p = self.layouts[PRESSURE]
        Cm = np.zeros((lay_p.ndof, lay_s.ndof))

        def accumulate(c, q, p, w):
            tensors, _ = self.stress_basis(c, p)
            sd = lay_s.cell_dofs[c]
            for a in range(8):
                Cm[c, sd[a]] += w * pr.alpha / pr.dlam2mu * np.trace(tensors[a])

        self.cellwise(accumulate)
        return Cm

    def dense_a_tilde(self, sigma_coef, p_coef):
        pr = self.params
        lay_f = self.layouts[FLUX]
        lay_s = self.layouts[STRESS]
        At = np.zeros((lay_f.ndof, lay_f.ndof))

        def accumulate(c, q, p, w):
            tensors, _ = self.stress_basis(c, p)
            sd = lay_s.cell_dofs[c]
            tr = sum(sigma_coef[sd[a]] * np.trace(tensors[a]) for a in range(8))
            kinv = physics.kappa_inv(tr, p_coef[c], pr)
            rt, _ = self.flux_basis(c, p)
            fd = lay_f.cell_dofs[c]
            for a in range(3):
                for b in range(3):
                    At[fd[a], fd[b]] += w * kinv * rt[a] @ rt[b]

        self.cellwise(accumulate)
        return At

    def dense_newton(self, sigma_coef, p_coef, phi_coef):
        pr = self.params
        lay_f = self.layouts[FLUX]
        lay_s = self.layouts[STRESS]
        N_s = np.zeros((lay_f.ndof, lay_s.ndof))
        N_p = np.zeros((lay_f.ndof, self.layouts[PRESSURE].ndof))

        def accumulate(c, q, p, w):
            tensors, _ = self.stress_basis(c, p)
            sd = lay_s.cell_dofs[c]
            fd = lay_f.cell_dofs[c]
            tr = sum(sigma_coef[sd[a]] * np.trace(tensors[a]) for a in range(8))
            d_tr, d_p = physics.kappa_inv_derivatives(tr, p_coef[c], pr)
            rt, _ = self.flux_basis(c, p)
            phi = sum(phi_coef[fd[a]] * rt[a] for a in range(3))
            for i in range(3):
                dot = rt[i] @ phi
                for a in range(8):
                    N_s[fd[i], sd[a]] += w * d_tr * dot * np.trace(tensors[a])
                N_p[fd[i], c] += w * d_p * dot

        self.cellwise(accumulate)
        return N_s, N_p


def rel_err(sparse_mat, dense_mat):
    scale = max(np.abs(dense_mat).max(), 1e-30)
    return np.abs(sparse_mat.toarray() - dense_mat).max() / scale


@pytest.mark.parametrize("mesh_idx", range(3))
class TestBlocksAgainstOracle:
    def setup_method(self, method):
        self.meshes = small_meshes()

    def _ctx(self, mesh_idx):
        mesh = self.meshes[mesh_idx]
        layouts = spaces.build_layouts(mesh)
        ctx = assembly.ElementContext(mesh, layouts, PARAMS)
        oracle = Oracle(mesh, PARAMS)
        return ctx, oracle

    def test_a_block(self, mesh_idx):
        ctx, oracle = self._ctx(mesh_idx)
        assert rel_err(assembly.assemble_a(ctx), oracle.dense_a()) < 1e-12

    def test_b_blocks(self, mesh_idx):
        ctx, oracle = self._ctx(mesh_idx)
        B_u, B_rho = assembly.assemble_b(ctx)
        d_u, d_rho = oracle.dense_b()
        assert rel_err(B_u, d_u) < 1e-12
        assert rel_err(B_rho, d_rho) < 1e-12

    def test_c_block(self, mesh_idx):
        ctx, oracle = self._ctx(mesh_idx)
        assert rel_err(assembly.assemble_c(ctx), oracle.dense_c()) < 1e-12

    def test_a_tilde_block(self, mesh_idx):
        ctx, oracle = self._ctx(mesh_idx)
        rng = np.random.default_rng(mesh_idx)
        sig = 0.1 * rng.standard_normal(ctx.layouts[STRESS].ndof)
        p = 0.1 * rng.standard_normal(ctx.layouts[PRESSURE].ndof)
        At = assembly.assemble_a_tilde(ctx, sig, p)
        # same rule as assembly: the weight is non-polynomial, so a finer
        # oracle rule would only measure quadrature differences
        oracle_same = Oracle(ctx.mesh, PARAMS, degree=ctx.quad.degree)
        assert rel_err(At, oracle_same.dense_a_tilde(sig, p)) < 1e-12
        assert rel_err(At, oracle.dense_a_tilde(sig, p)) < 1e-5

    def test_a_tilde_block_constant_weight(self, mesh_idx):
        ctx, oracle = self._ctx(mesh_idx)
        sig = np.zeros(ctx.layouts[STRESS].ndof)
        p = np.zeros(ctx.layouts[PRESSURE].ndof)
        At = assembly.assemble_a_tilde(ctx, sig, p)
        assert rel_err(At, oracle.dense_a_tilde(sig, p)) < 1e-12

    def test_b_tilde_exact_entries(self, mesh_idx):
        ctx, _ = self._ctx(mesh_idx)
        mesh = ctx.mesh
        Bt = assembly.assemble_b_tilde(ctx).toarray()
        lens = mesh.edge_lengths()
        for c in range(mesh.num_cells):
            for j in range(3):
                e = mesh.cell_edges[c, j]
                expect = mesh.cell_edge_signs[c, j] * lens[e]
                assert Bt[c, e] == pytest.approx(expect, rel=1e-13)

    def test_c_tilde_diagonal(self, mesh_idx):
        ctx, _ = self._ctx(mesh_idx)
        ct = assembly.assemble_c_tilde(ctx).toarray()
        gt = physics.gamma_tilde(PARAMS)
        assert np.allclose(ct, np.diag(gt * ctx.geo.area), atol=1e-15)

    def test_newton_coupling(self, mesh_idx):
        ctx, oracle = self._ctx(mesh_idx)
        rng = np.random.default_rng(10 + mesh_idx)
        sig = 0.1 * rng.standard_normal(ctx.layouts[STRESS].ndof)
        p = 0.1 * rng.standard_normal(ctx.layouts[PRESSURE].ndof)
        phi = rng.standard_normal(ctx.layouts[FLUX].ndof)
        N_s, N_p = assembly.assemble_newton_coupling(ctx, sig, p, phi)
        oracle_same = Oracle(ctx.mesh, PARAMS, degree=ctx.quad.degree)
        d_s, d_p = oracle_same.dense_newton(sig, p, phi)
        assert rel_err(N_s, d_s) < 1e-12
        assert rel_err(N_p, d_p) < 1e-12


class TestRhsAndEssential:
    def test_source_terms_constant_data(self):
        mesh = pm.unit_square_mesh(2)
        case = physics.constant_state_case(PARAMS)
        layouts = spaces.build_layouts(mesh)
        ctx = assembly.ElementContext(mesh, layouts, PARAMS)
        H, F, Ht, Ft = assembly.assemble_rhs(ctx, case)
        # f = 0 for the affine patch case
        assert np.allclose(F, 0.0, atol=1e-14)
        # g is constant: the cell load is -g |K|
        g0 = float(case.g(0.3, 0.3))
        assert np.allclose(Ft, -g0 * ctx.geo.area, atol=1e-14)

    def test_dirichlet_moments(self):
        mesh = pm.unit_square_mesh(2)
        case = physics.example1_case()
        layouts = spaces.build_layouts(mesh)
        ctx = assembly.ElementContext(mesh, layouts, case.params)
        H, F, Ht, Ft = assembly.assemble_rhs(ctx, case)
        E = mesh.num_edges
        x, w = spaces.edge_quadrature(assembly.EDGE_QUAD_DEGREE)
        for e in mesh.boundary_edges(pm.GAMMA_D):
            a, b = mesh.vertices[mesh.edges[e]]
            pts = a[None, :] + x[:, None] * (b - a)[None, :]
            length = np.linalg.norm(b - a)
            uD = case.u_dirichlet(pts[:, 0], pts[:, 1])
            pD = case.p_dirichlet(pts[:, 0], pts[:, 1])
            for r in range(2):
                expect = length * (w * uD[:, r]).sum()
                assert H[r * E + e] == pytest.approx(expect, abs=1e-12)
            assert Ht[e] == pytest.approx(length * (w * pD).sum(), abs=1e-12)
        # interior and Neumann entries stay zero
        interior = np.setdiff1d(np.arange(E), mesh.boundary_edges(pm.GAMMA_D))
        assert np.allclose(Ht[interior], 0.0)

    def test_essential_values_are_edge_means(self):
        mesh = pm.unit_square_mesh(2)
        case = physics.example1_case()
        layouts = spaces.build_layouts(mesh)
        ctx = assembly.ElementContext(mesh, layouts, case.params)
        idx, vals = assembly.essential_values(ctx, case)
        assert np.all(np.diff(idx) > 0)
        offs = assembly.field_offsets(layouts)
        normals = mesh.edge_normals()
        x, w = spaces.edge_quadrature(assembly.EDGE_QUAD_DEGREE)
        lookup = dict(zip(idx.tolist(), vals.tolist()))
        for e in mesh.boundary_edges(pm.GAMMA_N):
            a, b = mesh.vertices[mesh.edges[e]]
            pts = a[None, :] + x[:, None] * (b - a)[None, :]
            fn = case.normal_flux(pts[:, 0], pts[:, 1],
                                  np.broadcast_to(normals[e], pts.shape))
            expect = (w * fn).sum()
            got = lookup[offs[FLUX][0] + e]
            assert got == pytest.approx(expect, abs=1e-12)

    def test_no_neumann_no_essential(self):
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mesh = pm.TriMesh(verts, np.array([[0, 1, 2]]),
                          {(0, 1): "D", (1, 2): "D", (0, 2): "D"})
        case = physics.constant_state_case(PARAMS)
        layouts = spaces.build_layouts(mesh)
        ctx = assembly.ElementContext(mesh, layouts, PARAMS)
        idx, vals = assembly.essential_values(ctx, case)
        assert idx.size == 0 and vals.size == 0


class TestMonolithic:
    def test_picard_matrix_symmetric(self):
        mesh = pm.unit_square_mesh(2)
        disc = assembly.Discretization(mesh, PARAMS)
        sig = np.zeros(disc.layouts[STRESS].ndof)
        p = np.zeros(disc.layouts[PRESSURE].ndof)
        M = disc.matrix(sig, p)
        asym = abs(M - M.T).max()
        assert asym < 1e-13 * abs(M).max()

    def test_block_signs(self):
        mesh = pm.unit_square_mesh(1)
        disc = assembly.Discretization(mesh, PARAMS)
        sig = np.zeros(disc.layouts[STRESS].ndof)
        p = np.zeros(disc.layouts[PRESSURE].ndof)
        M = disc.matrix(sig, p).toarray()
        o = disc.offsets
        # flux row carries the negated Darcy mass block
        At = assembly.assemble_a_tilde(disc.ctx, sig, p).toarray()
        blk = M[o[FLUX][0]:o[FLUX][1], o[FLUX][0]:o[FLUX][1]]
        assert np.allclose(blk, -At, atol=1e-14)
        # pressure row: +c_tilde on the diagonal, -B_tilde coupling
        ct = disc.c_t.toarray()
        blk_p = M[o[PRESSURE][0]:o[PRESSURE][1], o[PRESSURE][0]:o[PRESSURE][1]]
        assert np.allclose(blk_p, ct, atol=1e-14)
        blk_bt = M[o[PRESSURE][0]:o[PRESSURE][1], o[FLUX][0]:o[FLUX][1]]
        assert np.allclose(blk_bt, -disc.B_t.toarray(), atol=1e-14)

    def test_eliminate_preserves_symmetry_and_values(self):
        mesh = pm.unit_square_mesh(2)
        case = physics.example1_case()
        system = assembly.assemble_monolithic(mesh, case.params, case)
        reduced = assembly.apply_essential_bc(system)
        M, rhs = reduced.matrix, reduced.rhs
        assert abs(M - M.T).max() < 1e-12 * abs(M).max()
        X = np.linalg.solve(M.toarray(), rhs)
        assert np.allclose(X[system.essential_idx], system.essential_val,
                           atol=1e-12)

    def test_residual_zero_at_linear_solution(self):
        mesh = pm.unit_square_mesh(2)
        params = PARAMS.with_(k1=0.0)  # constant permeability: linear problem
        case = physics.constant_state_case(params)
        system = assembly.assemble_monolithic(mesh, params, case)
        reduced = assembly.apply_essential_bc(system)
        X = np.linalg.solve(reduced.matrix.toarray(), reduced.rhs)
        disc = assembly.Discretization(mesh, params)
        res = disc.residual(X, disc.rhs(case))
        free = np.ones(disc.total_dofs, dtype=bool)
        free[system.essential_idx] = False
        assert np.abs(res[free]).max() < 1e-10
