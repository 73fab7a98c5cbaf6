"""Sparse direct factorization, MinRes, CG, the multiplier saddle system and
block-diagonal Riesz-map preconditioners."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .dg_space import DgSpace, InterfaceSpace
from .forms import (BoundaryCondition, CoefficientSet, assemble_membrane_mass,
                    assemble_stiffness, dg_seminorm_operator)
from .mesh import subdomain_diameter

SparseMatrix = sp.csr_matrix


class SolverError(RuntimeError):
    pass


class NotSPDError(SolverError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, msg, x=None, iterations=None):
        super().__init__(msg)
        self.x = x
        self.iterations = iterations


def to_csr(A) -> sp.csr_matrix:
    """Canonical CSR: duplicates summed, column indices sorted."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def is_symmetric(A, rtol: float = 1e-12) -> bool:
    A = sp.csr_matrix(A)
    scale = abs(A).max() if A.nnz else 1.0
    d = A - A.T
    return (abs(d).max() if d.nnz else 0.0) <= rtol * scale


class Factorization:
    """Sparse LU in symmetric mode with an approximate-minimum-degree ordering.

    For SPD input only diagonal pivots are used, so the pivots are the D of
    an LDL^T factorization and a non-positive one exposes an indefinite
    matrix.  With ``spd=False`` partial pivoting is enabled.
    """

    def __init__(self, A, spd: bool = True):
        self.A = to_csr(A)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("matrix must be square")
        try:
            if spd:
                self._lu = spl.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A",
                                    diag_pivot_thresh=0.0,
                                    options={"SymmetricMode": True})
            else:
                # indefinite (bordered) systems need threshold pivoting
                self._lu = spl.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise NotSPDError(f"factorization failed: {exc}") from exc
        if spd:
            piv = self._lu.U.diagonal()
            if np.any(piv <= 0) or not np.all(np.isfinite(piv)):
                raise NotSPDError(
                    f"non-positive pivot {piv.min():.3e}: matrix is not positive definite")
        self.shape = self.A.shape

    def solve(self, b) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    __call__ = solve


def factorize(A, spd: bool = True) -> Factorization:
    return Factorization(A, spd=spd)


def _as_apply(op) -> Callable:
    if op is None:
        return lambda v: v
    if callable(op) and not sp.issparse(op) and not isinstance(op, np.ndarray):
        return op
    if hasattr(op, "matvec"):
        return op.matvec
    return lambda v: op @ v


@dataclass
class KrylovInfo:
    iterations: int
    residuals: list[float] = field(default_factory=list)
    converged: bool = True

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(self.residuals):
                w.writerow([i, repr(float(r))])


def minres(operator, preconditioner, b, tol: float = 1e-12, maxit: int = 1000,
           relative: bool = False, return_info: bool = False, raise_on_fail: bool = True):
    """Preconditioned MinRes from the zero vector.

    ``preconditioner`` applies P^{-1} (SPD).  Iteration stops when the
    preconditioned residual norm sqrt(r^T P^{-1} r) drops below ``tol``
    (times its initial value if ``relative``).
    """
    A = _as_apply(operator)
    M = _as_apply(preconditioner)
    b = np.asarray(b, dtype=float)
    n = b.size
    x = np.zeros(n)
    r1 = b.copy()
    y = M(r1)
    beta1 = float(r1 @ y)
    if beta1 < 0:
        raise NotSPDError("preconditioner is not positive definite")
    beta1 = np.sqrt(beta1)
    history = [beta1]
    stop = tol * beta1 if relative else tol
    if beta1 <= stop:
        info = KrylovInfo(0, history)
        return (x, 0, info) if return_info else (x, 0)
    oldb, beta, dbar, epsln, phibar = 0.0, beta1, 0.0, 0.0, beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    r2 = r1
    eps = np.finfo(float).eps
    for itn in range(1, maxit + 1):
        v = y / beta
        y = A(v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        r1, r2 = r2, y
        y = M(r2)
        oldb = beta
        beta2 = float(r2 @ y)
        if beta2 < 0:
            raise NotSPDError("preconditioner is not positive definite")
        beta = np.sqrt(beta2)
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.hypot(gbar, beta), eps)
        cs, sn = gbar / gamma, beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        w1, w2 = w2, w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w
        history.append(phibar)
        if phibar < stop or beta == 0.0:
            info = KrylovInfo(itn, history)
            return (x, itn, info) if return_info else (x, itn)
    if raise_on_fail:
        raise ConvergenceError(f"MinRes did not converge in {maxit} iterations", x, maxit)
    info = KrylovInfo(maxit, history, converged=False)
    return (x, maxit, info) if return_info else (x, maxit)


def cg(operator, preconditioner, b, tol: float = 1e-10, maxit: int = 1000, x0=None,
       rtol: float = 0.0, return_info: bool = False):
    """Preconditioned conjugate gradients with warm start.

    Stops when ||b - A x||_2 <= max(tol, rtol * ||b||_2).
    """
    A = _as_apply(operator)
    M = _as_apply(preconditioner)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A(x)
    stop = max(tol, rtol * float(np.linalg.norm(b)))
    rn = float(np.linalg.norm(r))
    history = [rn]
    if rn <= stop:
        info = KrylovInfo(0, history)
        return (x, 0, info) if return_info else (x, 0)
    z = M(r)
    rz = float(r @ z)
    if rz <= 0:
        raise NotSPDError("preconditioner is not positive definite")
    p = z.copy()
    for itn in range(1, maxit + 1):
        q = A(p)
        pq = float(p @ q)
        if pq <= 0:
            raise NotSPDError("CG breakdown: operator is not positive definite")
        a = rz / pq
        x += a * p
        r -= a * q
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if rn <= stop:
            info = KrylovInfo(itn, history)
            return (x, itn, info) if return_info else (x, itn)
        z = M(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"CG did not converge in {maxit} iterations", x, maxit)


# ---------------------------------------------------------------------------

@dataclass
class SaddleSystem:
    """[[A, b], [b^T, 0]] with a single multiplier for the extracellular mean."""
    lead: sp.csr_matrix
    constraint: np.ndarray
    rhs: np.ndarray | None = None

    def __post_init__(self):
        self.lead = to_csr(self.lead)
        self.constraint = np.asarray(self.constraint, dtype=float)
        if not np.any(self.constraint):
            raise ValueError("constraint row is zero")
        if self.constraint.shape != (self.lead.shape[0],):
            raise ValueError("constraint row does not match the leading block")

    @property
    def n(self) -> int:
        return self.lead.shape[0]

    def matvec(self, z):
        u, p = z[:-1], z[-1]
        return np.concatenate([self.lead @ u + self.constraint * p, [self.constraint @ u]])

    def matrix(self) -> sp.csr_matrix:
        b = sp.csr_matrix(self.constraint[:, None])
        return to_csr(sp.bmat([[self.lead, b], [b.T, None]]))

    def full_rhs(self, load, mean: float = 0.0) -> np.ndarray:
        return np.concatenate([np.asarray(load, float), [mean]])

    def solve_direct(self, rhs=None) -> np.ndarray:
        rhs = self.rhs if rhs is None else rhs
        return Factorization(self.matrix(), spd=False).solve(rhs)

    def as_operator(self) -> spl.LinearOperator:
        return spl.LinearOperator((self.n + 1, self.n + 1), matvec=self.matvec, dtype=float)


class NormChoice(enum.Enum):
    SIMPLE = "simple"
    POINCARE = "poincare"
    POINCARE_A = "poincare_a"


def poincare_alpha(mesh) -> float:
    """alpha = 1 / diam(Omega_e)."""
    return 1.0 / subdomain_diameter(mesh, 0)


@dataclass
class RieszPreconditioner:
    norm: NormChoice
    alpha: float
    operator: sp.csr_matrix
    multiplier: float
    factor: Factorization = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.factor is None:
            try:
                self.factor = Factorization(self.operator, spd=True)
            except NotSPDError as exc:
                raise NotSPDError(f"{self.norm.value} norm operator is indefinite: {exc}") from exc

    @property
    def n(self) -> int:
        return self.operator.shape[0]

    def apply(self, z):
        z = np.asarray(z, float)
        return np.concatenate([self.factor.solve(z[:-1]), [z[-1] / self.multiplier]])

    __call__ = apply


def build_riesz(space: DgSpace, coeff: CoefficientSet, tau: float,
                norm: NormChoice | str = NormChoice.POINCARE, alpha: float | None = None,
                stiffness=None, membrane_mass=None, bc: BoundaryCondition | None = None,
                iface: InterfaceSpace | None = None) -> RieszPreconditioner:
    """Exact Riesz map for the chosen norm on V_h x R."""
    norm = NormChoice(norm)
    if norm is NormChoice.SIMPLE:
        alpha = 1.0
    elif alpha is None:
        alpha = poincare_alpha(space.mesh)
    if membrane_mass is None:
        membrane_mass = assemble_membrane_mass(space, coeff, iface)
    mass_e = space.mass_matrix(labels=[0])
    if norm is NormChoice.POINCARE_A:
        main = stiffness if stiffness is not None else assemble_stiffness(space, coeff, bc)
    else:
        main = dg_seminorm_operator(space, coeff.gamma)
    op = to_csr(alpha ** 2 * mass_e + main + membrane_mass / tau)
    area = space.mesh.subdomain_area(0)
    return RieszPreconditioner(norm, float(alpha), op, area / alpha ** 2)


def write_iteration_log(path, rows, header=("L", "norm", "iterations")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
