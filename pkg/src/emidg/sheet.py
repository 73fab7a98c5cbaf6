"""2D sheet of plus-shaped cardiac cells: Aliev-Panfilov membranes towards the
extracellular space, gap junctions between neighbouring cells."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dg_space import DgSpace, InterfaceSpace
from .forms import BCMode, BoundaryCondition, CoefficientSet
from .membrane import AlievPanfilov, GapJunction, MembraneMap, Stimulus, stimulus_mask
from .mesh import GeometrySpec, build, sheet_cell_index
from .saddle_solver import NormChoice
from .time_integrator import (IterationRecorder, ProbeRecorder, SnapshotWriter, TimeStepper,
                              TransientProblem, run)


@dataclass
class SheetConfig:
    rows: int = 3
    cols: int = 3
    resolution: int = 6            # grid squares per cell side
    cell_size: float = 24e-4       # cm
    links: str = "tree"            # "grid" also joins every vertical neighbour
    tau: float = 0.01              # ms
    T: float = 100.0               # ms
    degree: int = 1
    kappa_e: float = 20.0          # mS/cm
    kappa_i: float = 4.0
    cm_membrane: float = 1.0       # uF/cm^2
    cm_gap: float = 0.5
    R_G: float = 0.05              # kOhm cm^2
    E_G: float = 0.0
    stimulus: Stimulus = field(default_factory=Stimulus)
    stimulated: list | None = None  # cell labels; default: odd columns of the bottom row
    probe_every: int = 10
    snapshot_every: int = 0

    def stimulated_cells(self) -> list[int]:
        if self.stimulated is not None:
            return list(self.stimulated)
        return [sheet_cell_index(0, c, self.cols) for c in range(1, self.cols, 2)]


def sheet_problem(cfg: SheetConfig) -> TransientProblem:
    mesh = build(GeometrySpec("sheet", cfg.resolution,
                              {"rows": cfg.rows, "cols": cfg.cols, "cell_size": cfg.cell_size,
                               "links": cfg.links}))
    space = DgSpace(mesh, cfg.degree)
    labels = mesh.subdomains
    kappa = {l: (cfg.kappa_e if l == 0 else cfg.kappa_i) for l in labels}
    caps = {p: (cfg.cm_membrane if p[0] == 0 else cfg.cm_gap) for p in mesh.interface_pairs()}
    coeff = CoefficientSet(kappa, caps)
    ap = AlievPanfilov(stimulus=cfg.stimulus)
    membranes = MembraneMap.sheet(ap, GapJunction(cfg.R_G, cfg.E_G))
    iface = InterfaceSpace(space)
    mask = stimulus_mask(iface, "bottom", cfg.stimulated_cells())
    steps = int(round(cfg.T / cfg.tau))
    return TransientProblem(space, coeff, steps * cfg.tau, steps,
                            bc=BoundaryCondition(BCMode.DIRICHLET), membranes=membranes,
                            stimulus_mask=mask, solver="cg", cg_tol=1e-10,
                            riesz=NormChoice.POINCARE_A)


@dataclass
class SheetResult:
    t: np.ndarray
    cells: list[int]
    potentials: np.ndarray        # (times, cells) mean membrane potential
    iteration_t: np.ndarray
    iterations: np.ndarray
    snapshots: list

    def activation_times(self, threshold: float = 0.0) -> dict[int, float]:
        out = {}
        for j, c in enumerate(self.cells):
            above = np.flatnonzero(self.potentials[:, j] > threshold)
            out[c] = float(self.t[above[0]]) if len(above) else float("inf")
        return out


def run_sheet(cfg: SheetConfig, out_dir=None) -> SheetResult:
    problem = sheet_problem(cfg)
    stepper = TimeStepper(problem)
    probes = ProbeRecorder(every=cfg.probe_every)
    its = IterationRecorder()
    observers = [probes, its]
    snaps = None
    if out_dir is not None and cfg.snapshot_every:
        snaps = SnapshotWriter(out_dir, every=cfg.snapshot_every)
        observers.append(snaps)
    run(stepper, observers)
    if out_dir is not None:
        probes.write_csv(f"{out_dir}/probes.csv")
        its.write_csv(f"{out_dir}/iterations.csv")
    p = probes.summary()
    return SheetResult(np.array(p["t"]), p["cells"], p["values"], np.array(its.t),
                       np.array(its.iterations), snaps.files if snaps else [])
