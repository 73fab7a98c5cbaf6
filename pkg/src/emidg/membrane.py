"""Membrane current models, the Aliev-Panfilov gating ODE and stimulus protocols.

Units for the physiological models: mV, ms, mS/cm^2, uF/cm^2, kOhm cm^2.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.integrate import solve_ivp

from .quadrature import line_rule


class MembraneError(ValueError):
    pass


class StiffFailure(RuntimeError):
    """The adaptive ODE integrator could not complete a step."""


@dataclass(frozen=True)
class Stimulus:
    amplitude: float = 50.0
    start: float = 5.0
    stop: float = 15.0

    def __call__(self, t):
        t = np.asarray(t, float)
        on = (t > self.start) & (t < self.stop)
        out = np.where(on, self.amplitude, 0.0)
        return float(out) if out.ndim == 0 else out

    @property
    def switch_times(self) -> tuple[float, float]:
        return (self.start, self.stop)


NO_STIMULUS = Stimulus(amplitude=0.0)


def stimulus(t, amplitude: float = 50.0, start: float = 5.0, stop: float = 15.0):
    """I(t) = amplitude for start < t < stop, else 0."""
    return Stimulus(amplitude, start, stop)(t)


@dataclass(frozen=True)
class PassiveLinear:
    c: float = 0.0

    has_ode = False

    def __post_init__(self):
        if self.c < 0:
            raise MembraneError("passive conductance must be non-negative")

    def current(self, v, t=0.0, beta=None):
        return self.c * np.asarray(v, float)

    def rest_potential(self) -> float:
        return 0.0


@dataclass(frozen=True)
class GapJunction:
    R_G: float = 0.05
    E_G: float = 0.0

    has_ode = False

    def __post_init__(self):
        if not self.R_G > 0:
            raise MembraneError("gap junction resistance must be positive")

    def current(self, v, t=0.0, beta=None):
        return (np.asarray(v, float) - self.E_G) / self.R_G

    def rest_potential(self) -> float:
        return self.E_G


@dataclass(frozen=True)
class AlievPanfilov:
    c_t: float = 0.0775
    A: float = 100.0
    E_M: float = -85.0
    k: float = 8.0
    eta1: float = 0.13
    eta2: float = 1.0
    mu0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    stimulus: Stimulus = field(default_factory=Stimulus)
    rtol: float = 1e-6
    atol: float = 1e-8

    has_ode = True

    def __post_init__(self):
        if not self.A > 0:
            raise MembraneError("A must be positive")
        if not self.c_t > 0:
            raise MembraneError("c_t must be positive")

    def rest_potential(self) -> float:
        return self.E_M

    def alpha(self, v):
        # alpha vanishes at the resting potential E_M
        return (np.asarray(v, float) - self.E_M) / self.A

    def reaction(self, v, beta, I):
        a = self.alpha(v)
        return self.c_t * self.A * (I - self.k * a * (a - self.eta1) * (a - self.eta2) - a * beta)

    def gate_rate(self, v, beta):
        a = self.alpha(v)
        return (-self.c_t * (self.mu0 + self.mu1 * beta / (a + self.mu2))
                * (beta + self.k * a ** 2 - self.k * a * (self.eta1 + self.eta2)))

    def current(self, v, t=0.0, beta=None, stimulated=True):
        """Ionic current -c_t A (I - k a (a - eta1)(a - eta2) - a beta)."""
        beta = np.zeros_like(np.asarray(v, float)) if beta is None else beta
        I = self.stimulus(t) * np.asarray(stimulated, float)
        return -self.reaction(v, beta, I)


MembraneModel = PassiveLinear | GapJunction | AlievPanfilov


def current(model, v, t=0.0, beta=None):
    return model.current(v, t, beta)


class MembraneMap:
    """Assignment interface pair (i, j) -> membrane model."""

    def __init__(self, models: Mapping[tuple[int, int], object] | None = None, default=None):
        self.models = {}
        for pair, m in (models or {}).items():
            key = (min(pair), max(pair))
            if key in self.models:
                raise MembraneError(f"interface {key} assigned twice")
            self.models[key] = m
        self.default = default

    def model_for(self, pair):
        key = (min(pair), max(pair))
        if key in self.models:
            return self.models[key]
        if self.default is None:
            raise MembraneError(f"no membrane model for interface {key}")
        return self.default

    def validate(self, pairs) -> None:
        for p in pairs:
            self.model_for(p)

    @classmethod
    def sheet(cls, ap: AlievPanfilov | None = None, gap: GapJunction | None = None):
        """Aliev-Panfilov on cell/extracellular interfaces, gap junctions between cells."""
        return _SheetMap(ap or AlievPanfilov(), gap or GapJunction())


class _SheetMap(MembraneMap):
    def __init__(self, ap, gap):
        super().__init__()
        self.ap, self.gap = ap, gap

    def model_for(self, pair):
        return self.ap if min(pair) == 0 else self.gap


@dataclass
class MembraneState:
    """Transmembrane potential v and gate beta at the collocation points
    (k+1 Gauss points per membrane facet, same count as interface DOFs)."""
    v: np.ndarray
    beta: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.v = np.asarray(self.v, float)
        self.beta = np.asarray(self.beta, float)
        if self.v.shape != self.beta.shape:
            raise MembraneError("v and beta must have the same length")

    def write_csv(self, path, mode: str = "w") -> None:
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(["t", "dof_id", "v", "beta"])
            for i, (v, b) in enumerate(zip(self.v, self.beta)):
                w.writerow([repr(self.t), i, repr(float(v)), repr(float(b))])


def ode_step(model: AlievPanfilov, state: MembraneState, tau: float, mask=None) -> MembraneState:
    """Advance (v, beta) by tau with an adaptive RK 4(5) pair.

    ``mask`` selects the points that receive the stimulus.  The interval is
    split at the stimulus switch times so the integrator never steps across
    a discontinuity.
    """
    if not tau > 0:
        raise MembraneError("tau must be positive")
    n = state.v.size
    if n == 0:
        return replace(state, t=state.t + tau)
    mask = np.ones(n) if mask is None else np.asarray(mask, float)
    if mask.shape != (n,):
        raise MembraneError("stimulus mask has the wrong length")
    t0, t1 = state.t, state.t + tau
    cuts = [t0] + [s for s in model.stimulus.switch_times if t0 < s < t1] + [t1]
    y = np.concatenate([state.v, state.beta])
    for a, b in zip(cuts[:-1], cuts[1:]):
        # evaluate the stimulus at the sub-interval midpoint so the switch
        # times themselves are never sampled
        tm = 0.5 * (a + b)
        I = model.stimulus(tm) * mask

        def g(t, y, I=I):
            return np.concatenate([model.reaction(y[:n], y[n:], I), model.gate_rate(y[:n], y[n:])])

        sol = solve_ivp(g, (a, b), y, method="RK45", rtol=model.rtol, atol=model.atol)
        if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
            raise StiffFailure(f"membrane ODE failed on [{a}, {b}]: {sol.message}")
        y = sol.y[:, -1]
    return MembraneState(y[:n], y[n:], t1)


def rk4_reference(model: AlievPanfilov, state: MembraneState, tau: float, substeps: int,
                  mask=None) -> MembraneState:
    """Classical fixed-step RK4 (test oracle), split at the stimulus switch
    times like :func:`ode_step` with ``substeps`` steps per piece."""
    n = state.v.size
    mask = np.ones(n) if mask is None else np.asarray(mask, float)
    y = np.concatenate([state.v, state.beta])
    t0, t1 = state.t, state.t + tau
    cuts = [t0] + [s for s in model.stimulus.switch_times if t0 < s < t1] + [t1]
    for a, b in zip(cuts[:-1], cuts[1:]):
        I = model.stimulus(0.5 * (a + b)) * mask

        def f(y, I=I):
            return np.concatenate([model.reaction(y[:n], y[n:], I), model.gate_rate(y[:n], y[n:])])

        dt = (b - a) / substeps
        for _ in range(substeps):
            k1 = f(y)
            k2 = f(y + dt / 2 * k1)
            k3 = f(y + dt / 2 * k2)
            k4 = f(y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return MembraneState(y[:n], y[n:], t1)


# ---------------------------------------------------------------------------
# collocation <-> interface coefficients

def collocation_points(k: int) -> np.ndarray:
    """The k+1 Gauss points on [0, 1] used for the membrane ODEs."""
    s, _ = line_rule(2 * k + 1)
    return s


def to_nodal(iface, coeffs) -> np.ndarray:
    s = collocation_points(iface.k)
    return iface.evaluate(coeffs, s).ravel()


def to_modal(iface, nodal) -> np.ndarray:
    s, w = line_rule(2 * iface.k + 1)
    return iface.project_values(np.asarray(nodal, float).reshape(-1, len(s)), s, w)


def stimulus_mask(iface, selector="bottom", cells=None) -> np.ndarray:
    """Boolean mask over interface DOFs.

    ``selector`` is ``"all"``, ``"none"`` or ``"bottom"``: the cell/extracellular
    facets of ``cells`` whose outward normal (seen from the cell) points in -y.
    """
    mesh = iface.mesh
    if selector == "all":
        return np.ones(iface.dim, dtype=bool)
    if selector == "none":
        return np.zeros(iface.dim, dtype=bool)
    if selector != "bottom":
        raise MembraneError(f"unknown stimulus selector {selector!r}")
    labels = iface.facet_labels()
    n = mesh.facet_normals[iface.facets]
    ext = labels[:, 1] == 0
    pick = ext & np.isin(labels[:, 0], list(cells or [])) & (n[:, 1] < -0.5)
    if not np.any(pick):
        raise MembraneError("stimulus selector matches no membrane facets")
    return np.repeat(pick, iface.nbf)
