"""Manufactured EMI test cases and the convergence-study driver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sy

from .dg_space import DgSpace
from .forms import BCMode, BoundaryCondition, CoefficientSet, ExactSolution, Sources
from .mesh import GeometrySpec, build
from .membrane import MembraneMap, PassiveLinear

X, Y, T, NX, NY = sy.symbols("x y t nx ny", real=True)


def _lamb(expr, args=(X, Y, T)):
    return sy.lambdify(args, expr, modules="numpy")


def _by_label(funcs: dict[int, Callable]):
    """Vectorised piecewise evaluation selecting the function by label."""
    def f(x, y, label, t):
        x, y, label = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float),
                                          np.asarray(label))
        out = np.zeros(x.shape)
        for lab, fn in funcs.items():
            m = label == lab
            if np.any(m):
                out[m] = np.broadcast_to(fn(x[m], y[m], t), x[m].shape)
        return out
    return f


@dataclass
class ManufacturedCase:
    """Exact piecewise solution with the data that make it solve the EMI
    system, up to the flux-defect and membrane correction terms."""
    name: str
    geometry: str
    base_resolution: int
    solution: dict[int, sy.Expr]
    kappa: dict[int, float]
    T: float
    capacitance: float = 1.0
    passive_c: float = 0.0
    bc_mode: BCMode = BCMode.NEUMANN_DATA
    tau_rule: Callable[[float], float] | None = None
    fixed_tau: float | None = None
    geometry_params: dict = field(default_factory=dict)
    interfaces: tuple = ()
    diagonal: str = "left"

    def mesh(self, level: int, diagonal: str | None = None):
        return build(GeometrySpec(self.geometry, self.base_resolution * 2 ** level,
                                  dict(self.geometry_params), diagonal or self.diagonal))

    def coefficients(self, gamma: float = 20.0, epsilon: int = 1) -> CoefficientSet:
        return CoefficientSet(dict(self.kappa), self.capacitance, gamma, epsilon)

    def boundary_condition(self) -> BoundaryCondition:
        return BoundaryCondition(self.bc_mode)

    def membranes(self) -> MembraneMap:
        return MembraneMap(default=PassiveLinear(self.passive_c))

    def time_grid(self, h: float) -> tuple[float, int]:
        """(tau, N) with tau * N = T and tau as close to the rule as allowed."""
        if self.fixed_tau is not None:
            n = int(round(self.T / self.fixed_tau))
        else:
            n = max(1, math.ceil(self.T / self.tau_rule(h) - 1e-9))
        return self.T / n, n

    # symbolic derivatives -------------------------------------------------
    def _flux(self, label):
        u = self.solution[label]
        k = self.kappa[label]
        return k * (sy.diff(u, X) * NX + sy.diff(u, Y) * NY)

    def exact(self) -> ExactSolution:
        vals = {l: _lamb(u) for l, u in self.solution.items()}
        gx = {l: _lamb(sy.diff(u, X)) for l, u in self.solution.items()}
        gy = {l: _lamb(sy.diff(u, Y)) for l, u in self.solution.items()}
        fx, fy = _by_label(gx), _by_label(gy)
        return ExactSolution(_by_label(vals), lambda x, y, l, t: (fx(x, y, l, t), fy(x, y, l, t)),
                             mean_free=self.bc_mode is not BCMode.DIRICHLET)

    def sources(self) -> Sources:
        vol = {}
        for l, u in self.solution.items():
            k = self.kappa[l]
            vol[l] = _lamb(-k * (sy.diff(u, X, 2) + sy.diff(u, Y, 2)))
        mem, sec = {}, {}
        args = (X, Y, NX, NY, T)
        for (a, b) in self.interfaces:
            jump = self.solution[a] - self.solution[b]
            g = self.capacitance * sy.diff(jump, T) + self.passive_c * jump + self._flux(a)
            mem[a, b] = _lamb(g, args)
            sec[a, b] = _lamb(self._flux(a) - self._flux(b), args)

        def pairwise(table):
            def f(x, y, nx, ny, l1, l2, t):
                x, y, nx, ny, l1, l2 = np.broadcast_arrays(x, y, nx, ny, l1, l2)
                out = np.zeros(x.shape)
                for (a, b), fn in table.items():
                    m = (l1 == a) & (l2 == b)
                    if np.any(m):
                        out[m] = np.broadcast_to(fn(x[m], y[m], nx[m], ny[m], t), x[m].shape)
                return out
            return f

        bflux = _lamb(self._flux(0), args)

        def boundary_flux(x, y, nx, ny, label, t):
            return bflux(x, y, nx, ny, t)

        value = _by_label({l: _lamb(u) for l, u in self.solution.items()})
        return Sources(volume=_by_label(vol), membrane=pairwise(mem),
                       membrane_second=pairwise(sec),
                       boundary_flux=boundary_flux if self.bc_mode is BCMode.NEUMANN_DATA else None,
                       dirichlet=value if self.bc_mode is BCMode.DIRICHLET else None)

    def initial_jump(self) -> Callable:
        jumps = {(a, b): _lamb((self.solution[a] - self.solution[b]).subs(T, 0))
                 for a, b in self.interfaces}

        def g(x, y, l1, l2):
            x, y, l1, l2 = np.broadcast_arrays(x, y, l1, l2)
            out = np.zeros(x.shape)
            for (a, b), fn in jumps.items():
                m = (l1 == a) & (l2 == b)
                if np.any(m):
                    out[m] = np.broadcast_to(fn(x[m], y[m], 0.0), x[m].shape)
            return out
        return g


def onecell(omega: float = 1e-6) -> ManufacturedCase:
    ue = sy.sin(sy.pi * (X + Y)) * sy.exp(-omega * T)
    ui = sy.cos(2 * sy.pi * (X - Y))
    return ManufacturedCase("onecell", "plus_cell", 8, {0: ue, 1: ui}, {0: 1.0, 1: 2.0},
                            T=1e-2, tau_rule=lambda h: h / 10, interfaces=((1, 0),))


def lowreg(s: float) -> ManufacturedCase:
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    r = sy.sqrt(X ** 2 + Y ** 2)
    th = sy.atan2(Y, X)
    ue = (1 + T) * r ** s * sy.sin(s * th)
    ui = ue + (1 + T) * (X + Y)
    return ManufacturedCase(f"lowreg({s})", "lshape", 4, {0: ue, 1: ui}, {0: 1.0, 1: 2.0},
                            T=1e-4, fixed_tau=1e-5, bc_mode=BCMode.DIRICHLET,
                            interfaces=((1, 0),))


def twocell() -> ManufacturedCase:
    u0 = T * sy.sin(sy.pi * (X + Y))
    u1 = T * sy.cos(2 * sy.pi * (X - Y))
    u2 = T * sy.sin(2 * sy.pi * (X + Y))
    return ManufacturedCase("twocell", "two_cell", 8, {0: u0, 1: u1, 2: u2},
                            {0: 1.0, 1: 2.0, 2: 3.0}, T=1.0, tau_rule=lambda h: h / 10,
                            interfaces=((1, 0), (2, 0), (1, 2)))


CASES = {"onecell": onecell, "lowreg": lowreg, "twocell": twocell}


def make_case(name: str, s: float | None = None) -> ManufacturedCase:
    if name == "lowreg":
        return lowreg(0.5 if s is None else s)
    if name not in CASES:
        raise ValueError(f"unknown case {name!r}")
    return CASES[name]()


# ---------------------------------------------------------------------------
# convergence study

def case_problem(case: ManufacturedCase, k: int, level: int, gamma: float = 20.0,
                 epsilon: int = 1, diagonal: str | None = None, steps: int | None = None):
    """The transient problem of ``case`` on refinement ``level``."""
    from .time_integrator import TransientProblem
    mesh = case.mesh(level, diagonal)
    space = DgSpace(mesh, k)
    if steps is None:
        _, steps = case.time_grid(mesh.h)
    return TransientProblem(space, case.coefficients(gamma, epsilon), case.T, steps,
                            bc=case.boundary_condition(), membranes=case.membranes(),
                            sources=case.sources(), initial_jump=case.initial_jump())


def error_row(case: ManufacturedCase, problem, level: int, errors: dict) -> dict:
    return {"level": level, "h": problem.space.mesh.h, "dofs": problem.space.dim,
            "tau": problem.tau, "steps": problem.num_steps, **errors}


def run_level(case: ManufacturedCase, k: int, level: int, **kw) -> dict:
    """Transient solve on one refinement level; returns the error row."""
    from .time_integrator import ErrorRecorder, TimeStepper, run
    problem = case_problem(case, k, level, **kw)
    rec = ErrorRecorder(case.exact(), include_boundary=case.bc_mode is BCMode.DIRICHLET)
    run(TimeStepper(problem), [rec])
    return error_row(case, problem, level, rec.summary())


def run_levels_shared(cases: list[ManufacturedCase], k: int, level: int, **kw) -> list[dict]:
    """Several cases on the same mesh and time grid sharing one factorization."""
    from .time_integrator import ErrorRecorder, TimeStepper, run
    rows, base, space = [], None, None
    for case in cases:
        problem = case_problem(case, k, level, **kw)
        if space is not None:
            problem.space = space
        space = problem.space
        stepper = TimeStepper(problem, reuse=base)
        base = base or stepper
        rec = ErrorRecorder(case.exact(), include_boundary=case.bc_mode is BCMode.DIRICHLET)
        run(stepper, [rec])
        rows.append(error_row(case, problem, level, rec.summary()))
    return rows


def add_rates(rows: list[dict]) -> list[dict]:
    """rate_l = log2(err_{l-1} / err_l)."""
    out = []
    for i, r in enumerate(rows):
        r = dict(r)
        for key in ("dg", "l2"):
            if i == 0:
                r[f"rate_{key}"] = float("nan")
            else:
                prev, cur = rows[i - 1][f"err_{key}"], r[f"err_{key}"]
                r[f"rate_{key}"] = math.log2(prev / cur) if prev > 0 and cur > 0 else float("nan")
        out.append(r)
    return out


def convergence_table(case: ManufacturedCase, k: int, levels, **kw) -> list[dict]:
    return add_rates([run_level(case, k, l, **kw) for l in levels])


# ---------------------------------------------------------------------------
# preconditioner study on elongated domains

FAMILIES = {"single": "strip_cell", "connected": "strip_chain"}


def precond_system(family: str, L: int, resolution: int = 4, tau: float = 100.0, k: int = 1):
    """Multiplier saddle system of one backward Euler step on a strip of
    length L, with unit conductivities and a smooth volume load."""
    from .forms import assemble_load, assemble_membrane_mass, assemble_stiffness
    from .saddle_solver import SaddleSystem
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {sorted(FAMILIES)}")
    mesh = build(GeometrySpec(FAMILIES[family], resolution, {"L": L}))
    space = DgSpace(mesh, k)
    coeff = CoefficientSet({l: 1.0 for l in mesh.subdomains}, 1.0)
    A = assemble_stiffness(space, coeff)
    Mg = assemble_membrane_mass(space, coeff)
    load = assemble_load(space, Sources(
        volume=lambda x, y, l, t: np.sin(np.pi * x) * np.cos(np.pi * y)))
    system = SaddleSystem(A + Mg / tau, space.integral_row([0]))
    return space, coeff, A, Mg, system, system.full_rhs(load)


def precond_study(family: str, lengths=(2, 4, 8, 16, 32), norm="poincare",
                  resolution: int = 4, tau: float = 100.0, k: int = 1,
                  tol: float = 1e-12) -> list[dict]:
    """MinRes iteration counts from a zero start with the exact Riesz map."""
    from .saddle_solver import NormChoice, build_riesz, minres
    norm = NormChoice(norm)
    rows = []
    for L in lengths:
        space, coeff, A, Mg, system, rhs = precond_system(family, L, resolution, tau, k)
        P = build_riesz(space, coeff, tau, norm, stiffness=A, membrane_mass=Mg)
        _, its = minres(system.matvec, P, rhs, tol=tol, maxit=20 * system.n)
        rows.append({"L": L, "norm": norm.value, "iterations": its})
    return rows


# ---------------------------------------------------------------------------
# time step and mesh robustness of the Riesz preconditioner

def tau_study(levels=(0, 1, 2), taus=(1e-1, 1e-3, 1e-5), norm="poincare_a", k: int = 1,
              tol: float = 1e-12) -> list[dict]:
    """MinRes iterations for the first backward Euler step of the single-cell
    case, for each mesh level and time step."""
    from .saddle_solver import NormChoice, SaddleSystem, build_riesz, minres
    from .time_integrator import TimeStepper, TransientProblem
    case = make_case("onecell")
    norm = NormChoice(norm)
    rows = []
    for level in levels:
        space = DgSpace(case.mesh(level), k)
        coeff = case.coefficients()
        for tau in taus:
            problem = TransientProblem(space, coeff, tau, 1, bc=case.boundary_condition(),
                                       membranes=case.membranes(), sources=case.sources(),
                                       initial_jump=case.initial_jump())
            stepper = TimeStepper(problem)
            rhs = stepper.step_rhs(stepper.initial_state())
            system = SaddleSystem(stepper.lead, stepper.b)
            P = build_riesz(space, coeff, tau, norm, stiffness=stepper.A, membrane_mass=stepper.Mg)
            _, its = minres(system.matvec, P, system.full_rhs(rhs), tol=tol,
                            maxit=20 * system.n)
            rows.append({"level": level, "h": space.mesh.h, "tau": tau, "norm": norm.value,
                         "iterations": its})
    return rows
