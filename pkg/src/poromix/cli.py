"""Command-line drivers for convergence, adaptive, and single-solve runs."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

from . import estimator, mesh as meshmod, physics, postproc, solver

EXIT_CONFIG = 2
EXIT_MESH = 3
EXIT_SOLVER = 4
EXIT_IO = 5

EXPERIMENTS = ("convergence", "adaptive", "solve")
CASES = ("example1", "example3", "custom")
GEOMETRIES = ("unit_square", "lshape")

_PARAM_KEYS = ("lam", "mu", "alpha", "c0", "k0", "k1", "k2", "mu_f")
_LAW_NAMES = {"exp": physics.EXPONENTIAL, "kc": physics.KOZENY_CARMAN}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunConfig:
    experiment: str = "convergence"
    case: str = "example1"
    geometry: str | None = None  # default derived from the case
    mesh_path: str | None = None
    levels: int = 5
    n: int = 2
    solver: solver.SolverConfig = field(default_factory=solver.SolverConfig)
    zeta: float | None = None
    law: str | None = None
    params: dict = field(default_factory=dict)
    out: str = "."
    vtk: bool = False


def _coerce(key, value, kind):
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return out


def _apply(cfg: RunConfig, key: str, value, solver_kw: dict):
    """Set one flat (dotted) config key on the RunConfig under construction."""
    if key == "experiment":
        if value not in EXPERIMENTS:
            raise ConfigError(f"experiment: unknown value {value!r}")
        cfg.experiment = value
    elif key == "case":
        if value not in CASES:
            raise ConfigError(f"case: unknown value {value!r}")
        cfg.case = value
    elif key == "geometry":
        if isinstance(value, str) and value.startswith("mesh:"):
            cfg.geometry = "mesh_file"
            cfg.mesh_path = value[len("mesh:"):]
        elif value in GEOMETRIES:
            cfg.geometry = value
        else:
            raise ConfigError(f"geometry: unknown value {value!r}")
    elif key == "levels":
        cfg.levels = _coerce(key, value, int)
        if cfg.levels < 1:
            raise ConfigError("levels: must be >= 1")
    elif key == "n":
        cfg.n = _coerce(key, value, int)
        if cfg.n < 1:
            raise ConfigError("n: must be >= 1")
    elif key == "solver.method":
        if value not in (solver.PICARD, solver.NEWTON):
            raise ConfigError(f"solver.method: unknown value {value!r}")
        solver_kw["method"] = value
    elif key == "solver.tol":
        solver_kw["tol"] = _coerce(key, value, float)
    elif key == "solver.max_iter":
        solver_kw["max_iter"] = _coerce(key, value, int)
    elif key in ("zeta", "marking.zeta"):
        zeta = _coerce(key, value, float)
        if not 0.0 < zeta <= 1.0:
            raise ConfigError(f"{key}: must lie in (0, 1], got {zeta}")
        cfg.zeta = zeta
    elif key == "law":
        if value not in _LAW_NAMES:
            raise ConfigError(f"law: expected 'exp' or 'kc', got {value!r}")
        cfg.law = _LAW_NAMES[value]
    elif key.startswith("params."):
        name = key[len("params."):]
        if name not in _PARAM_KEYS:
            raise ConfigError(f"{key}: unknown parameter")
        cfg.params[name] = _coerce(key, value, float)
    elif key == "out":
        cfg.out = str(value)
    elif key == "vtk":
        if not isinstance(value, bool):
            raise ConfigError(f"vtk: expected bool, got {value!r}")
        cfg.vtk = value
    else:
        raise ConfigError(f"unknown key {key!r}")


def _validate(cfg: RunConfig, solver_kw: dict) -> RunConfig:
    try:
        cfg.solver = solver.SolverConfig(**solver_kw)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}")
    if cfg.geometry is None:
        cfg.geometry = "lshape" if cfg.case == "example3" else "unit_square"
    if cfg.geometry == "mesh_file" and not os.path.isfile(cfg.mesh_path):
        raise ConfigError(f"geometry: mesh file {cfg.mesh_path!r} not found")
    if cfg.experiment == "adaptive":
        if cfg.zeta is None:
            raise ConfigError("zeta: required for the adaptive experiment")
    elif cfg.zeta is not None:
        raise ConfigError(
            f"zeta: only valid for the adaptive experiment, not {cfg.experiment!r}")
    if cfg.case != "custom" and (cfg.params or cfg.law):
        raise ConfigError("params/law: overrides require case = custom")
    return cfg


def _build_argparser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="poromix",
        description="Mixed finite element experiments for poroelasticity")
    sub = ap.add_subparsers(dest="experiment")
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--case", choices=CASES)
        sp.add_argument("--geometry")
        sp.add_argument("--levels", type=int)
        sp.add_argument("--n", type=int)
        sp.add_argument("--method", choices=(solver.PICARD, solver.NEWTON))
        sp.add_argument("--tol", type=float)
        sp.add_argument("--law", choices=tuple(_LAW_NAMES))
        sp.add_argument("--zeta", type=float)
        sp.add_argument("--out")
        sp.add_argument("--vtk", action="store_true", default=None)
    return ap


_FLAG_KEYS = {"case": "case", "geometry": "geometry", "levels": "levels",
              "n": "n", "method": "solver.method", "tol": "solver.tol",
              "law": "law", "zeta": "zeta", "out": "out", "vtk": "vtk"}


def parse_config(argv) -> RunConfig:
    """Build a validated RunConfig from flags and an optional JSON file.

    The JSON file holds flat keys with dotted sections (``solver.tol``);
    command-line flags override file values.
    """
    try:
        ns = _build_argparser().parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            raise ConfigError("invalid command line") from exc
        raise
    cfg = RunConfig()
    solver_kw = {}
    if ns.experiment is not None:
        cfg.experiment = ns.experiment
    if getattr(ns, "config", None):
        try:
            with open(ns.config) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"config: cannot read {ns.config!r}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {ns.config!r}: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config: top-level JSON value must be an object")
        for key in sorted(data):
            _apply(cfg, key, data[key], solver_kw)
    if ns.experiment is not None:
        cfg.experiment = ns.experiment
    for flag, key in _FLAG_KEYS.items():
        value = getattr(ns, flag, None)
        if value is not None:
            _apply(cfg, key, value, solver_kw)
    return _validate(cfg, solver_kw)


def _build_case(cfg: RunConfig) -> physics.ManufacturedCase:
    if cfg.case == "example1":
        return physics.example1_case()
    if cfg.case == "example3":
        return physics.example3_case()
    kw = dict(cfg.params)
    if cfg.law is not None:
        kw["law"] = cfg.law
    try:
        params = physics.ParameterSet(**kw)
    except ValueError as exc:
        raise ConfigError(f"params: {exc}")
    geometry = "lshape" if cfg.geometry == "lshape" else "unit_square"
    return physics.zero_case(params, geometry=geometry)


def _initial_mesh(cfg: RunConfig) -> meshmod.TriMesh:
    if cfg.geometry == "unit_square":
        return meshmod.unit_square_mesh(cfg.n)
    if cfg.geometry == "lshape":
        return meshmod.lshape_mesh(cfg.n)
    return meshmod.read_mesh(cfg.mesh_path)


def _row(level, errors, rates, sol, case, xi) -> dict:
    row = errors.as_dict()
    row.update(rates)
    row["level"] = level
    equ, mass = postproc.conservation_metrics(sol, case)
    row["equ_h"] = equ
    row["mass_h"] = mass
    row["newton_iters"] = sol.iterations
    row["xi"] = xi
    row["eff"] = estimator.efficiency_index(errors.e_total, xi)
    return row


def _emit(history_rows, cfg: RunConfig) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"{cfg.experiment}_{cfg.case}.csv")
    postproc.write_csv(history_rows, path)
    print(",".join(postproc.CSV_COLUMNS))
    for row in history_rows:
        print(postproc.format_table_row(row))


def _error_mode(case) -> str:
    return postproc.PROJECTED_DIV if case.singular_corner else postproc.ANALYTIC


def _write_level_vtk(cfg, sol, level, xi_cells=None):
    path = os.path.join(cfg.out, f"{cfg.experiment}_{cfg.case}_{level}.vtk")
    postproc.write_vtk(sol, path, xi_cells=xi_cells)


def run_convergence(cfg: RunConfig) -> int:
    case = _build_case(cfg)
    msh = _initial_mesh(cfg)
    mode = _error_mode(case)
    rows = []
    history = []
    for level in range(cfg.levels):
        sol = solver.solve(msh, case, cfg.solver)
        errors = postproc.compute_errors(sol, case, mode=mode)
        history.append(errors.as_dict())
        rates = postproc.convergence_rates(history)[-1]
        xi = estimator.estimate(sol, case).xi
        rows.append(_row(level, errors, rates, sol, case, xi))
        if cfg.vtk:
            _write_level_vtk(cfg, sol, level)
        if level + 1 < cfg.levels:
            msh = meshmod.uniform_refine(msh)
    _emit(rows, cfg)
    return 0


def run_adaptive(cfg: RunConfig) -> int:
    case = _build_case(cfg)
    msh = _initial_mesh(cfg)
    marking = estimator.MarkingConfig(zeta=cfg.zeta)
    history = estimator.adaptive_loop(case, msh, cfg.levels, marking,
                                      solver_config=cfg.solver,
                                      error_mode=_error_mode(case))
    err_rows = [entry["errors"].as_dict() for entry in history]
    rate_rows = postproc.convergence_rates(err_rows, dof_based=True)
    rows = []
    for entry, rates in zip(history, rate_rows):
        sol = entry["solution"]
        report = entry["report"]
        rows.append(_row(entry["level"], entry["errors"], rates, sol, case,
                         report.xi))
        if cfg.vtk:
            _write_level_vtk(cfg, sol, entry["level"],
                             xi_cells=report.cell_sq)
    _emit(rows, cfg)
    return 0


def run_solve(cfg: RunConfig) -> int:
    case = _build_case(cfg)
    msh = _initial_mesh(cfg)
    sol = solver.solve(msh, case, cfg.solver)
    errors = postproc.compute_errors(sol, case, mode=_error_mode(case))
    rates = postproc.convergence_rates([errors.as_dict()])[-1]
    xi = estimator.estimate(sol, case).xi
    rows = [_row(0, errors, rates, sol, case, xi)]
    os.makedirs(cfg.out, exist_ok=True)
    postproc.write_vtk(sol, os.path.join(cfg.out, f"solve_{cfg.case}.vtk"))
    _emit(rows, cfg)
    return 0


_DRIVERS = {"convergence": run_convergence, "adaptive": run_adaptive,
            "solve": run_solve}


def run(cfg: RunConfig) -> int:
    """Execute the configured experiment; returns the process exit status."""
    try:
        return _DRIVERS[cfg.experiment](cfg)
    except ConfigError as exc:
        print(f"poromix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except meshmod.MeshError as exc:
        print(f"poromix: mesh error: {exc}", file=sys.stderr)
        return EXIT_MESH
    except (solver.SolverError, physics.PermeabilityError) as exc:
        print(f"poromix: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"poromix: io error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"poromix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
