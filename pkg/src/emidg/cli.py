"""Command-line harness: ``emidg converge | precond | sheet | solve``.

Exit codes: 0 success, 1 run failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import ConfigError, RunConfig
from .config import load as load_config

EOC_HEADER = ("level", "h", "dofs", "err_dg", "rate_dg", "err_l2", "rate_l2")
PRECOND_HEADER = ("L", "norm", "iterations")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers

def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_eoc_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EOC_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(k, float("nan"))) for k in EOC_HEADER])


def write_manifest(out_dir: Path, command: str, params: dict, results=None) -> Path:
    manifest = {
        "command": command,
        "package": "emidg",
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "parameters": params,
        "results": results or {},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _levels(text) -> list[int]:
    """``4`` means levels 0..3; ``2,3,4`` lists them explicitly."""
    s = str(text)
    if "," in s:
        levels = _int_list(s)
    else:
        try:
            n = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid level count {text!r}")
        levels = list(range(n))
    if len(levels) < 2 or min(levels) < 0:
        raise argparse.ArgumentTypeError("need at least two non-negative levels")
    return levels


def _merge_config(args, command: str, defaults: dict) -> dict:
    """Command-line flags override ``--config`` values, which override defaults."""
    values = dict(defaults)
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError("", f"cannot read config {args.config!r}: {exc.strerror}")
        except yaml.YAMLError as exc:
            raise ConfigError("", f"invalid YAML: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("<root>", "expected a mapping")
        for key, val in data.items():
            if key not in defaults:
                raise ConfigError(key, f"unknown key for '{command}'")
            values[key] = val
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


# ---------------------------------------------------------------------------
# converge

CONVERGE_DEFAULTS = {"case": "onecell", "degree": 1, "levels": 4, "s": 0.5,
                     "diagonal": "left", "gamma": 20.0, "epsilon": 1}


def cmd_converge(args) -> int:
    from .cases import add_rates, make_case, run_level
    p = _merge_config(args, "converge", CONVERGE_DEFAULTS)
    levels = _levels(p["levels"])
    degrees = _int_list(p["degree"]) if isinstance(p["degree"], str) else [int(p["degree"])]
    if p["epsilon"] not in (-1, 0, 1):
        raise ConfigError("epsilon", f"must be -1, 0 or 1, got {p['epsilon']!r}")
    try:
        case = make_case(p["case"], float(p["s"]))
    except ValueError as exc:
        raise ConfigError("case" if p["case"] != "lowreg" else "s", str(exc))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    status, results = EXIT_OK, {}
    for k in degrees:
        if k not in (1, 2, 3):
            raise ConfigError("degree", f"must be 1, 2 or 3, got {k}")
        rows = []
        path = out / f"eoc_{p['case']}_k{k}.csv"
        try:
            for level in levels:
                rows.append(run_level(case, k, level, gamma=float(p["gamma"]),
                                      epsilon=int(p["epsilon"]), diagonal=p["diagonal"]))
        except Exception as exc:  # keep the partial table
            print(f"error: level {level} failed: {exc}", file=sys.stderr)
            status = EXIT_FAIL
        rows = add_rates(rows)
        write_eoc_csv(path, rows)
        results[f"k{k}"] = {"table": path.name, "levels_completed": len(rows)}
        print(f"# {case.name}, k={k}")
        print(" ".join(EOC_HEADER))
        for r in rows:
            print(f"{r['level']} {r['h']:.4e} {r['dofs']} {r['err_dg']:.3e} {r['rate_dg']:.2f} "
                  f"{r['err_l2']:.3e} {r['rate_l2']:.2f}")
        if status:
            break
    write_manifest(out, "converge", {**p, "levels": levels, "degree": degrees}, results)
    return status


# ---------------------------------------------------------------------------
# precond

PRECOND_DEFAULTS = {"family": "both", "norm": "all", "lengths": "2,4,8,16,32",
                    "resolution": 4, "tau": 100.0, "degree": 1}


def cmd_precond(args) -> int:
    from .cases import FAMILIES, precond_study
    from .saddle_solver import NormChoice, write_iteration_log
    p = _merge_config(args, "precond", PRECOND_DEFAULTS)
    families = list(FAMILIES) if p["family"] == "both" else [p["family"]]
    for f in families:
        if f not in FAMILIES:
            raise ConfigError("family", f"must be one of {sorted(FAMILIES)} or 'both'")
    norms = ([NormChoice.SIMPLE, NormChoice.POINCARE] if p["norm"] == "all"
             else [p["norm"]])
    try:
        norms = [NormChoice(n) for n in norms]
    except ValueError:
        raise ConfigError("norm", f"unknown norm {p['norm']!r}")
    lengths = _int_list(p["lengths"]) if isinstance(p["lengths"], str) else list(p["lengths"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for f in families:
        table = []
        for norm in norms:
            rows = precond_study(f, lengths, norm, int(p["resolution"]), float(p["tau"]),
                                 int(p["degree"]))
            table += [(r["L"], r["norm"], r["iterations"]) for r in rows]
            print(f"{f:10s} {norm.value:10s} " + " ".join(str(r["iterations"]) for r in rows))
        write_iteration_log(out / f"iterations_{f}.csv", table, PRECOND_HEADER)
        results[f] = f"iterations_{f}.csv"
    write_manifest(out, "precond", {**p, "lengths": lengths}, results)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sheet

SHEET_DEFAULTS = {"rows": 3, "cols": 3, "resolution": 6, "tau": 0.01, "T": 100.0,
                  "degree": 1, "stimulated": None, "links": "tree", "snapshot_every": 0,
                  "probe_every": 10, "amplitude": 50.0}


def cmd_sheet(args) -> int:
    from .membrane import Stimulus
    from .sheet import SheetConfig, run_sheet
    p = _merge_config(args, "sheet", SHEET_DEFAULTS)
    stim = p["stimulated"]
    if isinstance(stim, str):
        stim = _int_list(stim)
    cfg = SheetConfig(rows=int(p["rows"]), cols=int(p["cols"]), resolution=int(p["resolution"]),
                      tau=float(p["tau"]), T=float(p["T"]), degree=int(p["degree"]),
                      links=p["links"], stimulated=stim,
                      stimulus=Stimulus(amplitude=float(p["amplitude"])),
                      probe_every=int(p["probe_every"]),
                      snapshot_every=int(p["snapshot_every"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = run_sheet(cfg, out)
    act = res.activation_times(0.0)
    for c, t in act.items():
        print(f"cell {c}: " + ("never exceeds 0 mV" if math.isinf(t) else f"exceeds 0 mV at t={t:g} ms"))
    write_manifest(out, "sheet", {**p, "stimulated": cfg.stimulated_cells()}, {
        "probes": "probes.csv", "iterations": "iterations.csv",
        "activation_ms": {str(c): (None if math.isinf(t) else t) for c, t in act.items()},
        "snapshots": [Path(f).name for f in res.snapshots]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve

def _build_problem(cfg: RunConfig):
    from .dg_space import DgSpace, InterfaceSpace
    from .forms import BCMode, BoundaryCondition, CoefficientSet, FormError
    from .membrane import (AlievPanfilov, GapJunction, MembraneMap, PassiveLinear, Stimulus,
                           stimulus_mask)
    from .mesh import GeometrySpec, MeshError, build, read_mesh
    from .time_integrator import TransientProblem

    if cfg.case is not None:
        from .cases import case_problem, make_case
        case = make_case(cfg.case, cfg.s)
        problem = case_problem(case, cfg.degree, cfg.level, cfg.gamma, cfg.epsilon,
                               cfg.geometry.get("diagonal"), cfg.steps)
        if cfg.T is not None and cfg.T != case.T:
            raise ConfigError("time.T", f"case {cfg.case} runs to T={case.T}")
        return problem, case

    geo = cfg.geometry
    try:
        if "mesh_file" in geo:
            mesh = read_mesh(geo["mesh_file"])
        else:
            res = geo["resolution"] * 2 ** cfg.level
            mesh = build(GeometrySpec(geo["name"], res, geo["params"], geo["diagonal"]))
    except MeshError as exc:
        raise ConfigError("geometry", str(exc))
    labels = mesh.subdomains
    kappa = {l: cfg.kappa.get(l, 1.0) for l in labels}
    extra = set(cfg.kappa) - set(labels)
    if extra:
        raise ConfigError("coefficients.kappa", f"labels {sorted(extra)} are not in the mesh")
    cap = cfg.capacitance
    try:
        coeff = CoefficientSet(kappa, cap, cfg.gamma, cfg.epsilon, cfg.kappa_penalty)
        if isinstance(cap, dict):
            for pair in mesh.interface_pairs():
                coeff.capacitance_of(pair)
    except FormError as exc:
        raise ConfigError("coefficients", str(exc))
    space = DgSpace(mesh, cfg.degree)
    mem = cfg.membrane
    mask = None
    if mem["model"] == "passive":
        membranes = MembraneMap(default=PassiveLinear(mem["c"]))
    else:
        st = mem["stimulus"]
        ap = AlievPanfilov(stimulus=Stimulus(st["amplitude"], st["start"], st["stop"]))
        if mem["model"] == "sheet":
            membranes = MembraneMap.sheet(ap, GapJunction(mem["R_G"], mem["E_G"]))
        else:
            membranes = MembraneMap(default=ap)
        try:
            mask = stimulus_mask(InterfaceSpace(space), st["selector"], st["cells"])
        except ValueError as exc:
            raise ConfigError("membrane.stimulus", str(exc))
    bc = BoundaryCondition(BCMode.DIRICHLET if cfg.bc == "dirichlet" else BCMode.NEUMANN_MEAN)
    if cfg.solver == "cg" and cfg.bc != "dirichlet":
        raise ConfigError("solver.method", "cg needs bc.mode: dirichlet (no multiplier)")
    problem = TransientProblem(space, coeff, cfg.T, cfg.steps, bc=bc, membranes=membranes,
                               stimulus_mask=mask, solver=cfg.solver, cg_tol=cfg.tol)
    return problem, None


def cmd_solve(args) -> int:
    from .cases import error_row
    from .forms import BCMode
    from .time_integrator import (ErrorRecorder, IterationRecorder, ProbeRecorder,
                                  SnapshotWriter, TimeStepper, run, write_vtk)
    if not args.config:
        raise UsageError("solve needs --config")
    cfg = load_config(args.config)
    if args.degree is not None:
        cfg.degree = int(args.degree)
    problem, case = _build_problem(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stepper = TimeStepper(problem)
    observers = []
    its = IterationRecorder()
    observers.append(its)
    rec = probes = None
    if case is not None:
        rec = ErrorRecorder(case.exact(), include_boundary=case.bc_mode is BCMode.DIRICHLET)
        observers.append(rec)
    if cfg.probes:
        probes = ProbeRecorder()
        observers.append(probes)
    if cfg.vtk_every:
        observers.append(SnapshotWriter(out / "snapshots", every=cfg.vtk_every))
    state, _ = run(stepper, observers)
    results = {"t_final": state.t, "steps": problem.num_steps,
               "dofs": problem.space.dim, "max_abs_u": float(np.abs(state.u).max(initial=0.0)),
               "jump_l2": stepper.iface.l2_norm(state.jump)}
    if cfg.vtk:
        write_vtk(out / "solution.vtk", problem.space, state.u, title=f"t={state.t!r}")
        results["vtk"] = "solution.vtk"
    if rec is not None:
        row = error_row(case, problem, cfg.level, rec.summary())
        row.update(rate_dg=float("nan"), rate_l2=float("nan"))
        write_eoc_csv(out / "errors.csv", [row])
        results["errors"] = {k: row[k] for k in ("err_dg", "err_l2", "err_jump")}
    if probes is not None:
        probes.write_csv(out / "probes.csv")
    if cfg.solver == "cg":
        its.write_csv(out / "iterations.csv")
    write_manifest(out, "solve", cfg.as_dict(), results)
    print(json.dumps(results, default=str))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emidg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"emidg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file with parameters (flags take precedence)")
        p.add_argument("--out-dir", default="emidg-out", help="output directory")

    p = sub.add_parser("converge", help="convergence study of a manufactured case")
    common(p)
    p.add_argument("--case", choices=["onecell", "lowreg", "twocell"])
    p.add_argument("--degree", help="polynomial degree, or a list such as 1,2,3")
    p.add_argument("--levels", help="number of levels (0..N-1) or an explicit list")
    p.add_argument("--s", type=float, help="regularity exponent for lowreg")
    p.add_argument("--diagonal", choices=["left", "right"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=int)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("precond", help="MinRes iterations on elongated domains")
    common(p)
    p.add_argument("--family", choices=["single", "connected", "both"])
    p.add_argument("--norm", choices=["simple", "poincare", "poincare_a", "all"])
    p.add_argument("--lengths", help="comma-separated strip lengths L")
    p.add_argument("--resolution", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--degree", type=int)
    p.set_defaults(func=cmd_precond)

    p = sub.add_parser("sheet", help="cell-sheet simulation with Aliev-Panfilov membranes")
    common(p)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--resolution", type=int, help="grid squares per cell side (multiple of 6)")
    p.add_argument("--tau", type=float, help="time step in ms")
    p.add_argument("--T", type=float, help="final time in ms")
    p.add_argument("--degree", type=int)
    p.add_argument("--stimulated", help="comma-separated cell labels")
    p.add_argument("--links", choices=["tree", "grid"])
    p.add_argument("--amplitude", type=float)
    p.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    p.add_argument("--probe-every", type=int, dest="probe_every")
    p.set_defaults(func=cmd_sheet)

    p = sub.add_parser("solve", help="one-shot run described by a YAML config")
    common(p)
    p.add_argument("--degree", type=int)
    p.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
