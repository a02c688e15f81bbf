"""Residual estimator, Dorfler marking, and the adaptive loop."""

import numpy as np
import pytest

from poromix import estimator, mesh as pm, physics, postproc, solver

PARAMS = physics.ParameterSet()


def patch_meshes():
    return [
        pm.unit_square_mesh(1),
        pm.bisect_refine(pm.unit_square_mesh(1), [0]),
        pm.lshape_mesh(1),
    ]


class TestEstimate:

    @pytest.mark.parametrize("mesh", patch_meshes(), ids=range(3))
    def test_vanishes_on_exact_discrete_state(self, mesh):
        geometry = "lshape" if mesh.vertices.min() < 0 else "unit_square"
        case = physics.constant_state_case(
            PARAMS, A=((0.0, 0.0), (0.0, 0.0)), p_const=0.7, u0=(0.3, -0.2),
            geometry=geometry)
        sol = solver.solve(mesh, case)
        assert estimator.estimate(sol, case).xi < 1e-9

    def test_total_is_root_sum_of_cells(self):
        case = physics.example1_case()
        sol = solver.solve(pm.unit_square_mesh(2), case)
        report = estimator.estimate(sol, case)
        assert report.cell_sq.shape == (sol.mesh.num_cells,)
        assert np.all(report.cell_sq >= 0)
        assert report.xi == pytest.approx(
            np.sqrt(report.cell_sq.sum()), rel=1e-12)
        assert np.allclose(report.cell_sq,
                           report.solid_sq + report.fluid_sq)

    def test_term_breakdown_sums_to_totals(self):
        case = physics.example1_case()
        sol = solver.solve(pm.unit_square_mesh(2), case)
        report = estimator.estimate(sol, case)
        solid = sum(report.solid_terms.values())
        fluid = sum(report.fluid_terms.values())
        assert np.allclose(solid, report.solid_sq)
        assert np.allclose(fluid, report.fluid_sq)


class TestDorflerMark:

    def test_dominant_cell(self):
        ind = np.array([4.0, 1.0, 1.0, 1.0, 1.0])
        got = estimator.dorfler_mark(ind, estimator.MarkingConfig(0.5))
        assert got.tolist() == [0]

    def test_equal_indicators(self):
        ind = np.ones(10)
        got = estimator.dorfler_mark(ind, estimator.MarkingConfig(0.3))
        assert got.tolist() == [0, 1, 2]

    def test_zeta_one_marks_all_positive(self):
        ind = np.array([0.2, 1.0, 0.5, 3.0])
        got = estimator.dorfler_mark(ind, estimator.MarkingConfig(1.0))
        assert got.tolist() == [0, 1, 2, 3]

    def test_tie_break_is_lower_index(self):
        ind = np.array([1.0, 2.0, 2.0, 1.0])
        got = estimator.dorfler_mark(ind, estimator.MarkingConfig(0.3))
        assert got.tolist() == [1]
        got = estimator.dorfler_mark(ind, estimator.MarkingConfig(0.6))
        assert got.tolist() == [1, 2]

    def test_minimality(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            ind = rng.uniform(0.0, 1.0, size=rng.integers(1, 40))
            zeta = rng.uniform(0.05, 1.0)
            got = estimator.dorfler_mark(ind, estimator.MarkingConfig(zeta))
            total = ind.sum()
            assert ind[got].sum() >= zeta * total - 1e-12 * total
            # dropping the smallest marked indicator breaks the bulk bound
            if got.size > 1:
                drop = got[np.argmin(ind[got])]
                kept = np.setdiff1d(got, [drop])
                assert ind[kept].sum() < zeta * total + 1e-12 * total

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        ind = rng.uniform(size=200)
        cfg = estimator.MarkingConfig(0.4)
        a = estimator.dorfler_mark(ind, cfg)
        b = estimator.dorfler_mark(ind.copy(), cfg)
        assert np.array_equal(a, b)

    def test_empty_raises(self):
        with pytest.raises(estimator.EstimatorError):
            estimator.dorfler_mark(np.array([]), estimator.MarkingConfig(0.5))

    def test_marking_config_validation(self):
        with pytest.raises(ValueError):
            estimator.MarkingConfig(0.0)
        with pytest.raises(ValueError):
            estimator.MarkingConfig(1.5)
        estimator.MarkingConfig(1.0)


class TestEfficiencyIndex:

    def test_ratio(self):
        assert estimator.efficiency_index(2.0, 4.0) == pytest.approx(0.5)

    def test_zero_estimator_nonzero_error(self):
        with pytest.raises(estimator.EstimatorError):
            estimator.efficiency_index(1.0, 0.0)

    def test_both_zero_is_nan(self):
        assert np.isnan(estimator.efficiency_index(0.0, 0.0))


class TestAdaptiveLoop:

    def test_levels_validation(self):
        case = physics.example1_case()
        with pytest.raises(ValueError):
            estimator.adaptive_loop(case, pm.unit_square_mesh(1), 0,
                                    estimator.MarkingConfig(0.5))

    def test_zeta_one_tracks_uniform_refinement(self):
        # zeta = 1 halves every cell diameter per level; the meshes are
        # bisection meshes rather than red-refined ones, so errors agree
        # closely but not exactly
        case = physics.example1_case()
        hist = estimator.adaptive_loop(case, pm.unit_square_mesh(2), 4,
                                       estimator.MarkingConfig(1.0),
                                       error_mode=postproc.ANALYTIC)
        mesh = pm.unit_square_mesh(2)
        uniform = []
        for entry in hist:
            assert entry["mesh"].num_cells == mesh.num_cells
            uniform.append(postproc.compute_errors(
                solver.solve(mesh, case), case).e_sigma)
            assert entry["errors"].e_sigma == pytest.approx(
                uniform[-1], rel=0.15)
            mesh = pm.uniform_refine(mesh)
        adapt = [e["errors"].e_sigma for e in hist]
        rate_a = np.log2(adapt[-2] / adapt[-1])
        rate_u = np.log2(uniform[-2] / uniform[-1])
        assert rate_a == pytest.approx(rate_u, abs=0.15)

    def test_dofs_strictly_increase(self):
        case = physics.example3_case()
        hist = estimator.adaptive_loop(case, pm.lshape_mesh(1), 4,
                                       estimator.MarkingConfig(9.5e-5))
        dofs = [e["errors"].dofs for e in hist]
        assert all(b > a for a, b in zip(dofs, dofs[1:]))
        levels = [e["level"] for e in hist]
        assert levels == list(range(4))

    def test_corner_concentration(self):
        # the pressure gradient blows up at the reentrant corner, so new
        # vertices pile up there far beyond the 5% area share of the
        # r < 0.25 neighborhood, and the share keeps growing with depth
        case = physics.example3_case()
        start = pm.lshape_mesh(1)
        hist = estimator.adaptive_loop(case, start, 10,
                                       estimator.MarkingConfig(9.5e-5))

        def corner_share(entry):
            new = entry["mesh"].vertices[start.num_vertices:]
            return np.mean(np.linalg.norm(new, axis=1) < 0.25)

        shares = [corner_share(e) for e in hist[5:]]
        assert shares[0] > 0.1
        assert all(b > a for a, b in zip(shares, shares[1:]))
        assert shares[-1] > 0.3
