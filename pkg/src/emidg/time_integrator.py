"""Backward Euler stepping and Godunov splitting for the EMI system.

Each step solves

    (C_M/tau M_Gamma + A) u^n (+ b p) = J^T (C_M/tau g^{n-1} - f_Gamma(g^{n-1})) + F(t_n)

with g = [u] the membrane jump, f_Gamma lagged, and the extracellular mean
fixed by the multiplier p unless Dirichlet data are imposed.
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dg_space import DgSpace, InterfaceSpace
from .forms import (BoundaryCondition, CoefficientSet, Sources, assemble_load,
                    assemble_membrane_mass, assemble_stiffness, error_norms,
                    interface_capacitance)
from .lifting import ConstrainedSubspaceSolver, Lifting
from .membrane import (MembraneMap, MembraneState, PassiveLinear, collocation_points, ode_step,
                       to_modal, to_nodal)
from .quadrature import line_rule
from .saddle_solver import Factorization, NormChoice, build_riesz, cg, to_csr


class TransientError(ValueError):
    pass


@dataclass
class TransientProblem:
    space: DgSpace
    coeff: CoefficientSet
    T: float
    num_steps: int
    bc: BoundaryCondition = field(default_factory=BoundaryCondition)
    membranes: MembraneMap = field(default_factory=lambda: MembraneMap(default=PassiveLinear()))
    sources: Sources | None = None
    initial_jump: object = None        # callable g(x, y, l1, l2), coefficients, or None (rest)
    initial_gate: float = 0.0
    stimulus_mask: np.ndarray | None = None
    solver: str = "direct"             # "direct" or "cg"
    cg_tol: float = 1e-10
    cg_maxit: int = 1000
    riesz: NormChoice = NormChoice.POINCARE_A
    initial_field: str = "lift"        # "lift" or "solve" (u^0 = S_h([u^0]))

    def __post_init__(self):
        if self.num_steps < 0 or int(self.num_steps) != self.num_steps:
            raise TransientError("num_steps must be a non-negative integer")
        if self.num_steps > 0 and not self.T > 0:
            raise TransientError("T must be positive")
        if self.solver not in ("direct", "cg"):
            raise TransientError("solver must be 'direct' or 'cg'")

    @property
    def tau(self) -> float:
        return self.T / self.num_steps if self.num_steps else float("nan")


@dataclass
class TransientState:
    u: np.ndarray
    jump: np.ndarray          # interface coefficients of [u]
    gates: np.ndarray         # beta at collocation points
    t: float = 0.0
    step: int = 0
    multiplier: float = 0.0
    iterations: int = 0

    def copy(self) -> "TransientState":
        return copy.deepcopy(self)


class TimeStepper:
    """Operators, factorizations and the step maps for one problem."""

    def __init__(self, problem: TransientProblem, reuse: "TimeStepper | None" = None):
        self.problem = problem
        p = problem
        self.space = p.space
        if reuse is not None:
            for name in ("iface", "J", "cm", "A", "Mg", "lead", "b", "factor", "precond",
                         "_groups", "_colloc"):
                setattr(self, name, getattr(reuse, name))
            return
        self.iface = InterfaceSpace(p.space)
        self.J = self.iface.jump_operator
        self.cm = interface_capacitance(self.iface, p.coeff)
        self.A = assemble_stiffness(p.space, p.coeff, p.bc)
        self.Mg = assemble_membrane_mass(p.space, p.coeff, self.iface)
        self.b = p.space.integral_row([0]) if p.bc.needs_mean_constraint else None
        self.factor = None
        self.precond = None
        if p.num_steps:
            self.lead = to_csr(self.A + self.Mg / p.tau)
            if self.b is not None:
                col = sp.csr_matrix(self.b[:, None])
                self.factor = Factorization(sp.bmat([[self.lead, col], [col.T, None]]), spd=False)
            elif p.solver == "direct":
                self.factor = Factorization(self.lead, spd=True)
            else:
                r = build_riesz(p.space, p.coeff, p.tau, p.riesz, stiffness=self.A,
                                membrane_mass=self.Mg)
                self.precond = r.factor
        else:
            self.lead = None
        self._colloc = collocation_points(self.space.k)
        self._groups = self._group_models()

    def _group_models(self):
        labels = np.sort(self.iface.facet_labels(), axis=1)
        groups = {}
        for f, pair in enumerate(map(tuple, labels)):
            model = self.problem.membranes.model_for(pair)
            groups.setdefault(id(model), (model, []))[1].append(f)
        out = []
        for model, facets in groups.values():
            dofs = self.iface.dofs(np.array(facets)).ravel()
            out.append((model, dofs))
        return out

    # -- initial data -----------------------------------------------------
    def initial_jump(self) -> np.ndarray:
        g0 = self.problem.initial_jump
        if g0 is None:
            g = np.zeros(self.iface.dim)
            for model, dofs in self._groups:
                g[dofs] = model.rest_potential()
            # constants: the nodal value equals the modal value times psi_0
            return to_modal(self.iface, g)
        if callable(g0):
            s, pts, w = self.iface.quadrature()
            l1 = np.broadcast_to(self.iface.facet_labels()[:, 0][:, None], w.shape)
            l2 = np.broadcast_to(self.iface.facet_labels()[:, 1][:, None], w.shape)
            vals = np.broadcast_to(g0(pts[..., 0], pts[..., 1], l1, l2), w.shape)
            return self.iface.project_values(vals, s, line_weights(self.space.k))
        g = np.asarray(g0, float)
        if g.shape != (self.iface.dim,):
            raise TransientError("initial jump has the wrong length")
        return g.copy()

    def initial_state(self) -> TransientState:
        g = self.initial_jump()
        p = self.problem
        if p.initial_field == "solve":
            if self.b is None:
                raise TransientError("initial_field='solve' needs the mean-constrained mode")
            load = assemble_load(self.space, p.sources, 0.0, p.coeff, p.bc)
            u = ConstrainedSubspaceSolver(self.space, self.A).solve_S(load, g)
        else:
            u = Lifting(self.space, self.iface)(g)
        gates = np.full(self.iface.dim, float(p.initial_gate))
        return TransientState(u, g, gates, 0.0, 0, 0.0, 0)

    # -- steps ------------------------------------------------------------
    def membrane_current(self, state: TransientState, skip_ode_models: bool) -> np.ndarray:
        """Interface coefficients of f_Gamma([u]) at the state."""
        if self.iface.dim == 0:
            return np.zeros(0)
        v = to_nodal(self.iface, state.jump)
        f = np.zeros_like(v)
        for model, dofs in self._groups:
            if skip_ode_models and model.has_ode:
                continue
            f[dofs] = model.current(v[dofs], state.t, state.gates[dofs])
        return to_modal(self.iface, f)

    def _solve(self, rhs, x0):
        p = self.problem
        if self.b is not None:
            z = self.factor.solve(np.concatenate([rhs, [0.0]]))
            return z[:-1], float(z[-1]), 0
        if self.factor is not None:
            return self.factor.solve(rhs), 0.0, 0
        x, its = cg(self.lead, self.precond, rhs, tol=p.cg_tol, maxit=p.cg_maxit, x0=x0)
        return x, 0.0, its

    def step_rhs(self, state: TransientState, skip_ode_models: bool = False) -> np.ndarray:
        """Right-hand side of the backward Euler step leaving ``state``."""
        p = self.problem
        f_gamma = self.membrane_current(state, skip_ode_models)
        rhs = self.J.T @ (self.cm / p.tau * state.jump - f_gamma)
        return rhs + assemble_load(self.space, p.sources, (state.step + 1) * p.tau, p.coeff, p.bc)

    def backward_euler_step(self, state: TransientState,
                            skip_ode_models: bool = False) -> TransientState:
        p = self.problem
        if not p.num_steps:
            raise TransientError("problem has no time steps")
        t_new = (state.step + 1) * p.tau
        u, mult, its = self._solve(self.step_rhs(state, skip_ode_models), state.u)
        return TransientState(u, self.J @ u, state.gates.copy(), t_new, state.step + 1, mult, its)

    def godunov_step(self, state: TransientState) -> TransientState:
        """Membrane ODEs over one step, then the PDE step with the ODE models'
        currents already accounted for (other models stay explicit)."""
        p = self.problem
        v = to_nodal(self.iface, state.jump)
        gates = state.gates.copy()
        mask = (np.zeros(self.iface.dim) if p.stimulus_mask is None
                else np.asarray(p.stimulus_mask, float))
        for model, dofs in self._groups:
            if not model.has_ode:
                continue
            ms = ode_step(model, MembraneState(v[dofs], gates[dofs], state.t), p.tau, mask[dofs])
            v[dofs] = ms.v
            gates[dofs] = ms.beta
        mid = replace(state, jump=to_modal(self.iface, v), gates=gates)
        return self.backward_euler_step(mid, skip_ode_models=True)

    @property
    def splitting(self) -> bool:
        return any(m.has_ode for m, _ in self._groups)

    def step(self, state: TransientState) -> TransientState:
        return self.godunov_step(state) if self.splitting else self.backward_euler_step(state)


def line_weights(k: int):
    return line_rule(2 * k + 2)[1]


# ---------------------------------------------------------------------------
# observers

class Observer:
    every: int = 1

    def __call__(self, stepper: TimeStepper, state: TransientState) -> None:
        raise NotImplementedError

    def summary(self):
        return None


class IterationRecorder(Observer):
    def __init__(self):
        self.t, self.iterations = [], []

    def __call__(self, stepper, state):
        if state.step > 0:
            self.t.append(state.t)
            self.iterations.append(state.iterations)

    def summary(self):
        return {"t": list(self.t), "iterations": list(self.iterations)}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "iterations"])
            w.writerows(zip(map(repr, self.t), self.iterations))


class JumpNormRecorder(Observer):
    def __init__(self):
        self.values = []

    def __call__(self, stepper, state):
        self.values.append(stepper.iface.l2_norm(state.jump))

    def summary(self):
        return list(self.values)


class ErrorRecorder(Observer):
    """Errors against an exact solution, at the final step only by default."""

    def __init__(self, exact, final_only: bool = True, include_boundary: bool = False):
        self.exact = exact
        self.final_only = final_only
        self.include_boundary = include_boundary
        self.rows = []

    def __call__(self, stepper, state):
        if self.final_only and state.step != stepper.problem.num_steps:
            return
        e = error_norms(stepper.space, state.u, self.exact, state.t, stepper.problem.coeff.gamma,
                        include_boundary=self.include_boundary)
        self.rows.append({"t": state.t, **e})

    def summary(self):
        return self.rows[-1] if self.rows else None


class ProbeRecorder(Observer):
    """Length-weighted mean transmembrane potential on each cell's
    cell/extracellular membrane."""

    def __init__(self, every: int = 1):
        self.every = every
        self.t, self.values, self.cells = [], [], None

    def _setup(self, stepper):
        iface = stepper.iface
        labels = iface.facet_labels()
        ext = labels[:, 1] == 0
        self.cells = sorted(set(labels[ext, 0].tolist()))
        self._weights = []
        for c in self.cells:
            pick = ext & (labels[:, 0] == c)
            self._weights.append((np.flatnonzero(pick), iface.lengths[pick]))

    def __call__(self, stepper, state):
        if self.cells is None:
            self._setup(stepper)
        if state.step % self.every and state.step != stepper.problem.num_steps:
            return
        g = state.jump.reshape(-1, stepper.iface.nbf)
        # the mean over a facet is the first modal coefficient / sqrt(length)
        row = []
        for facets, lengths in self._weights:
            means = g[facets, 0] / np.sqrt(lengths)
            row.append(float(np.sum(means * lengths) / lengths.sum()))
        self.t.append(state.t)
        self.values.append(row)

    def summary(self):
        return {"t": list(self.t), "cells": self.cells, "values": np.array(self.values)}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"cell_{c}" for c in self.cells])
            for t, row in zip(self.t, self.values):
                w.writerow([repr(t)] + [repr(v) for v in row])


class SnapshotWriter(Observer):
    def __init__(self, directory, every: int = 1, prefix: str = "u"):
        self.directory = Path(directory)
        self.every = every
        self.prefix = prefix
        self.files = []

    def __call__(self, stepper, state):
        if state.step % self.every and state.step != stepper.problem.num_steps:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"{self.prefix}_{state.step:06d}.vtk"
        write_vtk(path, stepper.space, state.u, title=f"t={state.t!r}")
        self.files.append(path)

    def summary(self):
        return [str(f) for f in self.files]


def write_vtk(path, space: DgSpace, field, title: str = "emidg") -> None:
    """Legacy ASCII unstructured grid; the field is sampled at each element's
    own vertices so discontinuities are preserved."""
    mesh = space.mesh
    M = mesh.num_elements
    pts = mesh.vertices[mesh.triangles].reshape(-1, 2)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    vals = np.einsum("qb,mb->mq", space.basis.values(corners),
                     np.asarray(field).reshape(M, space.nb)).ravel()
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {3 * M} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in pts.tolist()]
    lines.append(f"CELLS {M} {4 * M}")
    lines += [f"3 {3 * e} {3 * e + 1} {3 * e + 2}" for e in range(M)]
    lines.append(f"CELL_TYPES {M}")
    lines += ["5"] * M
    lines += [f"POINT_DATA {3 * M}", "SCALARS u double 1", "LOOKUP_TABLE default"]
    lines += [repr(float(v)) for v in vals]
    lines += [f"CELL_DATA {M}", "SCALARS subdomain int 1", "LOOKUP_TABLE default"]
    lines += [str(int(l)) for l in mesh.labels]
    Path(path).write_text("\n".join(lines) + "\n")


def run(problem_or_stepper, observers=(), state: TransientState | None = None):
    """Advance all steps, calling every observer after the initial state and
    after each step.  Returns (final state, {observer name: summary})."""
    stepper = (problem_or_stepper if isinstance(problem_or_stepper, TimeStepper)
               else TimeStepper(problem_or_stepper))
    state = stepper.initial_state() if state is None else state
    observers = list(observers)
    for obs in observers:
        obs(stepper, state)
    for _ in range(stepper.problem.num_steps):
        state = stepper.step(state)
        for obs in observers:
            obs(stepper, state)
    names = {}
    for i, obs in enumerate(observers):
        names[f"{type(obs).__name__}_{i}"] = obs.summary()
    return state, names
