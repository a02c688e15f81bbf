"""Configuration parsing, exit codes, and output files of the CLI."""

import json
import os

import pytest

from poromix import cli, mesh as pm, solver


def parse(argv):
    return cli.parse_config(argv)


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


class TestDefaults:

    def test_bare_subcommand(self):
        cfg = parse(["convergence"])
        assert cfg.experiment == "convergence"
        assert cfg.case == "example1"
        assert cfg.geometry == "unit_square"
        assert cfg.levels == 5
        assert cfg.n == 2
        assert cfg.solver.method == solver.NEWTON
        assert cfg.solver.tol == 1e-7
        assert cfg.zeta is None
        assert cfg.out == "."
        assert cfg.vtk is False

    def test_empty_config_file(self, tmp_path):
        path = write_config(tmp_path, {})
        cfg = parse(["convergence", "--config", path])
        assert cfg.case == "example1"
        assert cfg.levels == 5

    def test_example3_defaults_to_lshape(self):
        cfg = parse(["convergence", "--case", "example3"])
        assert cfg.geometry == "lshape"


class TestOverrides:

    def test_flags_override_file(self, tmp_path):
        path = write_config(tmp_path, {"levels": 3, "n": 4,
                                       "solver.tol": 1e-9})
        cfg = parse(["convergence", "--config", path, "--levels", "6"])
        assert cfg.levels == 6
        assert cfg.n == 4
        assert cfg.solver.tol == 1e-9

    def test_file_sets_solver_and_params(self, tmp_path):
        path = write_config(tmp_path, {"case": "custom", "law": "kc",
                                       "params.lam": 2.5,
                                       "solver.method": "picard",
                                       "solver.max_iter": 50})
        cfg = parse(["convergence", "--config", path])
        assert cfg.case == "custom"
        assert cfg.params == {"lam": 2.5}
        assert cfg.solver.method == solver.PICARD
        assert cfg.solver.max_iter == 50

    def test_mesh_file_geometry(self, tmp_path):
        mpath = tmp_path / "mesh.txt"
        pm.write_mesh(pm.unit_square_mesh(1), mpath)
        cfg = parse(["solve", "--geometry", f"mesh:{mpath}"])
        assert cfg.geometry == "mesh_file"
        assert cfg.mesh_path == str(mpath)


class TestValidation:

    def test_zeta_out_of_range(self, tmp_path):
        path = write_config(tmp_path, {"zeta": 1.5})
        with pytest.raises(cli.ConfigError):
            parse(["adaptive", "--config", path])

    def test_zeta_required_for_adaptive(self):
        with pytest.raises(cli.ConfigError):
            parse(["adaptive"])

    def test_zeta_rejected_elsewhere(self):
        with pytest.raises(cli.ConfigError):
            parse(["convergence", "--zeta", "0.5"])

    def test_unknown_key(self, tmp_path):
        path = write_config(tmp_path, {"grid": 4})
        with pytest.raises(cli.ConfigError):
            parse(["convergence", "--config", path])

    def test_params_require_custom_case(self, tmp_path):
        path = write_config(tmp_path, {"params.mu": 3.0})
        with pytest.raises(cli.ConfigError):
            parse(["convergence", "--config", path])

    def test_law_requires_custom_case(self):
        with pytest.raises(cli.ConfigError):
            parse(["convergence", "--law", "kc"])

    def test_missing_mesh_file(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            parse(["solve", "--geometry", f"mesh:{tmp_path}/absent.txt"])

    def test_levels_positive(self):
        with pytest.raises(cli.ConfigError):
            parse(["convergence", "--levels", "0"])

    def test_bad_solver_tolerance(self, tmp_path):
        path = write_config(tmp_path, {"solver.tol": -1.0})
        with pytest.raises(cli.ConfigError):
            parse(["convergence", "--config", path])


class TestExitCodes:

    def test_bad_config_is_2(self, capsys):
        assert cli.main(["convergence", "--zeta", "0.5"]) == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_bad_mesh_file_is_3(self, tmp_path, capsys):
        mpath = tmp_path / "broken.txt"
        mpath.write_text("not a mesh\n")
        code = cli.main(["solve", "--geometry", f"mesh:{mpath}",
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_MESH
        assert "mesh error" in capsys.readouterr().err

    def test_solver_failure_is_4(self, tmp_path, capsys):
        path = write_config(tmp_path, {"solver.max_iter": 1,
                                       "solver.tol": 1e-14})
        code = cli.main(["solve", "--config", path, "--levels", "1",
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_SOLVER
        assert "solver error" in capsys.readouterr().err

    def test_unwritable_out_is_5(self, tmp_path, capsys):
        # a regular file in the out path makes directory creation fail
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        code = cli.main(["convergence", "--levels", "1", "--n", "1",
                         "--out", str(blocker / "sub")])
        assert code == cli.EXIT_IO
        assert "io error" in capsys.readouterr().err


class TestRunOutputs:

    def test_convergence_writes_csv_and_stdout(self, tmp_path, capsys):
        argv = ["convergence", "--levels", "2", "--n", "1",
                "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        out = capsys.readouterr().out
        csv = (tmp_path / "convergence_example1.csv").read_text()
        assert out.strip() == csv.strip()
        lines = csv.strip().split("\n")
        assert lines[0].startswith("level,dofs,h,")
        assert len(lines) == 3

    def test_deterministic(self, tmp_path, capsys):
        texts = []
        for name in ("a", "b"):
            argv = ["convergence", "--levels", "2", "--n", "1",
                    "--out", str(tmp_path / name)]
            assert cli.main(argv) == 0
            capsys.readouterr()
            texts.append((tmp_path / name /
                          "convergence_example1.csv").read_text())
        assert texts[0] == texts[1]

    def test_adaptive_writes_csv(self, tmp_path, capsys):
        argv = ["adaptive", "--case", "example3", "--levels", "2",
                "--n", "1", "--zeta", "9.5e-5", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        capsys.readouterr()
        lines = (tmp_path / "adaptive_example3.csv").read_text().strip()
        assert len(lines.split("\n")) == 3

    def test_solve_writes_vtk(self, tmp_path, capsys):
        argv = ["solve", "--levels", "1", "--n", "1", "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        capsys.readouterr()
        assert (tmp_path / "solve_example1.vtk").exists()
        assert (tmp_path / "solve_example1.csv").exists()

    def test_custom_case_with_params(self, tmp_path, capsys):
        path = write_config(tmp_path, {"case": "custom", "law": "exp",
                                       "params.k1": 0.0})
        argv = ["solve", "--config", path, "--n", "1",
                "--out", str(tmp_path)]
        assert cli.main(argv) == 0
        capsys.readouterr()
        assert (tmp_path / "solve_custom.csv").exists()
