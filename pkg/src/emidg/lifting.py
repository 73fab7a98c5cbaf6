"""Interface lifting L_h, the solution operator S_h and the Gamma-reduced
backward Euler step.

The lifting of an interface function g lives on the first-side (cell) element
of every membrane facet F.  Writing a point of that element as
x = v0 + xi (a - v0) + eta (b - v0), with a, b the facet end points and v0 the
opposite vertex, the orthogonal projection onto the facet in reference
coordinates is s = (1 - xi + eta) / 2 and L_h g (x) = g(s).  This is a
polynomial of the same degree, so it is represented exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dg_space import DgSpace, InterfaceSpace, legendre_facet_values
from .forms import CoefficientSet, assemble_membrane_mass, interface_capacitance
from .saddle_solver import Factorization, to_csr


class LiftingError(ValueError):
    pass


def _local_frame(space: DgSpace, facets):
    """Opposite vertex v0 and the inverse of [a - v0, b - v0] per facet."""
    mesh = space.mesh
    el = mesh.facet_elements[facets, 0]
    if np.any(el < 0):
        raise LiftingError("membrane facet without a first-side element")
    v0 = mesh.vertices[mesh.triangles[el, mesh.facet_local[facets, 0]]]
    a = mesh.vertices[mesh.facets[facets, 0]]
    b = mesh.vertices[mesh.facets[facets, 1]]
    B = np.stack([a - v0, b - v0], axis=2)
    return el, v0, np.linalg.inv(B)


def _element_points(space: DgSpace, el):
    x, w, ref = space.element_quadrature(2 * space.k)
    return x[el], w[el], space.basis.values(ref)


class Lifting:
    """Sparse matrix of L_h: interface coefficients -> DG coefficients."""

    def __init__(self, space: DgSpace, iface: InterfaceSpace | None = None):
        self.space = space
        self.iface = iface or InterfaceSpace(space)
        facets = self.iface.facets
        k = space.k
        if len(facets) == 0:
            self.matrix = sp.csr_matrix((space.dim, 0))
            self.elements = np.zeros(0, dtype=int)
            return
        el, v0, Binv = _local_frame(space, facets)
        x, w, phi = _element_points(space, el)
        loc = np.einsum("fij,fqj->fqi", Binv, x - v0[:, None, :])
        s = 0.5 * (1.0 - loc[..., 0] + loc[..., 1])
        psi = legendre_facet_values(k, s, self.iface.lengths[:, None])  # (nF, Q, k+1)
        det = np.abs(space.det[el])
        blk = np.einsum("fq,fqm,qb->fbm", w, psi, phi) / det[:, None, None]
        rows = np.broadcast_to(space.dofs(el)[:, :, None], blk.shape)
        cols = np.broadcast_to(self.iface.dofs(np.arange(len(facets)))[:, None, :], blk.shape)
        self.matrix = to_csr(sp.csr_matrix((blk.ravel(), (rows.ravel(), cols.ravel())),
                                           shape=(space.dim, self.iface.dim)))
        self.elements = el
        self._frame = (v0, Binv)

    def __call__(self, g) -> np.ndarray:
        g = np.asarray(g, float)
        if g.shape != (self.iface.dim,):
            raise LiftingError("interface function has the wrong length")
        return self.matrix @ g

    def bubbles(self) -> sp.csr_matrix:
        """Columns lambda_F * q (q in P_{k-1}) on every lifting element: the
        functions there whose trace on the membrane facet vanishes."""
        space = self.space
        k = space.k
        facets = self.iface.facets
        if len(facets) == 0:
            return sp.csr_matrix((space.dim, 0))
        el = self.elements
        v0, Binv = self._frame
        x, w, phi = _element_points(space, el)
        loc = np.einsum("fij,fqj->fqi", Binv, x - v0[:, None, :])
        xi, eta = loc[..., 0], loc[..., 1]
        lam = 1.0 - xi - eta
        q = np.stack([lam * xi ** (d - j) * eta ** j for d in range(k) for j in range(d + 1)],
                     axis=-1)
        det = np.abs(space.det[el])
        blk = np.einsum("fq,fqm,qb->fbm", w, q, phi) / det[:, None, None]
        nq = q.shape[-1]
        rows = np.broadcast_to(space.dofs(el)[:, :, None], blk.shape)
        cols = np.broadcast_to((np.arange(len(el))[:, None] * nq + np.arange(nq))[:, None, :],
                               blk.shape)
        return sp.csr_matrix((blk.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(space.dim, len(el) * nq))


def lift_L(space: DgSpace, g, iface: InterfaceSpace | None = None) -> np.ndarray:
    return Lifting(space, iface)(g)


def continuity_basis(lifting: Lifting) -> sp.csr_matrix:
    """Matrix T whose columns span the DG functions with zero jump across the membrane."""
    space = lifting.space
    J = lifting.iface.jump_operator
    on_lift = np.zeros(space.dim, dtype=bool)
    on_lift[space.dofs(lifting.elements).ravel()] = True
    free = np.flatnonzero(~on_lift)
    E = sp.csr_matrix((np.ones(len(free)), (free, np.arange(len(free)))),
                      shape=(space.dim, len(free)))
    corr = lifting.matrix @ (J @ E)
    T = sp.hstack([E - corr, lifting.bubbles()]).tocsr()
    T.eliminate_zeros()
    return T


class ConstrainedSubspaceSolver:
    """Factorized auxiliary problem on the continuous-across-membrane subspace
    with zero extracellular mean (bordered by one multiplier)."""

    def __init__(self, space: DgSpace, stiffness, lifting: Lifting | None = None):
        self.space = space
        self.lifting = lifting or Lifting(space)
        self.A = to_csr(stiffness)
        self.T = continuity_basis(self.lifting)
        self.b = space.integral_row([0])
        Tb = self.T.T @ self.b
        red = self.T.T @ self.A @ self.T
        col = sp.csr_matrix(Tb[:, None])
        self.K = to_csr(sp.bmat([[red, col], [col.T, None]]))
        self.factor = Factorization(self.K, spd=False)
        self.multiplier = 0.0

    def solve_tilde(self, load, g) -> np.ndarray:
        """u~ with zero jump and zero mean such that a(u~, w) = F(w) - a(L g, w)."""
        rhs = np.asarray(load, float) - self.A @ self.lifting(g)
        z = self.factor.solve(np.concatenate([self.T.T @ rhs, [0.0]]))
        self.multiplier = z[-1]
        return self.T @ z[:-1]

    def solve_S(self, load, g) -> np.ndarray:
        return self.solve_tilde(load, g) + self.lifting(g)


@dataclass
class StepComparison:
    full: np.ndarray
    reduced: np.ndarray
    discrepancy: float


def reduced_step_equivalence(space: DgSpace, coeff: CoefficientSet, stiffness, tau: float,
                             g_prev, load=None, passive_c: float = 0.0) -> StepComparison:
    """One backward Euler step solved twice: with the full multiplier system and
    through the interface-only equation built from S_h and L_h.  The membrane
    current c*[u] is taken at the previous step.  Returns both membrane jumps
    and their L2(Gamma) distance."""
    iface = InterfaceSpace(space)
    J = iface.jump_operator
    cm = interface_capacitance(iface, coeff)
    A = to_csr(stiffness)
    F = np.zeros(space.dim) if load is None else np.asarray(load, float)
    g_prev = np.asarray(g_prev, float)
    mem_rhs = J.T @ (cm / tau * g_prev - passive_c * g_prev)

    # (a) full system with a multiplier for the extracellular mean
    lead = A + assemble_membrane_mass(space, coeff, iface) / tau
    b = space.integral_row([0])
    col = sp.csr_matrix(b[:, None])
    K = to_csr(sp.bmat([[lead, col], [col.T, None]]))
    u_full = Factorization(K, spd=False).solve(np.concatenate([F + mem_rhs, [0.0]]))[:-1]
    jump_full = J @ u_full

    # (b) interface equation (C_M/tau + L^T A H) g = ... with S_h g = S0 + H g
    solver = ConstrainedSubspaceSolver(space, A)
    Lmat = solver.lifting.matrix
    S0 = solver.solve_S(F, np.zeros(iface.dim))
    H = np.column_stack([solver.solve_S(np.zeros(space.dim), e) for e in np.eye(iface.dim)]) \
        if iface.dim else np.zeros((space.dim, 0))
    lhs = np.diag(cm / tau) + Lmat.T @ (A @ H)
    rhs = cm / tau * g_prev - passive_c * g_prev + Lmat.T @ F - Lmat.T @ (A @ S0)
    g = np.linalg.solve(lhs, rhs) if iface.dim else np.zeros(0)
    jump_red = J @ (S0 + H @ g)
    return StepComparison(jump_full, jump_red, iface.l2_norm(jump_full - jump_red))
