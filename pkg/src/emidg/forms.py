"""Interior penalty DG forms for the EMI model.

The bilinear form is

    a_h(u, v) = sum_K (kappa grad u, grad v)_K
                - sum_F ({kappa grad u}.n, [v])_F
                - eps * sum_F ({kappa grad v}.n, [u])_F
                + sum_F gamma kappa_F / h_F ([u], [v])_F

over the interior facets that are not on the membrane (and the outer
boundary in Dirichlet mode), with h_F the facet length.  The penalty is
scaled by kappa_F, the largest eigenvalue of the conductivities on either
side, so that gamma = 20 keeps the form coercive for k <= 3 independently of
the conductivity scale (``kappa_penalty=False`` gives the unscaled gamma/h_F).  ``eps = +1`` gives
the symmetric method (SIPG), ``0`` the incomplete and ``-1`` the
non-symmetric one.  Membrane facets only enter through the capacitive term
``sum (C_M [u], [v])_Gamma`` assembled by :func:`assemble_membrane_mass`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .dg_space import DgSpace, InterfaceSpace
from .mesh import FacetKind
from .quadrature import line_rule


class FormError(ValueError):
    pass


def _as_tensor(k) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        k = k * np.eye(2)
    if k.shape != (2, 2):
        raise FormError("conductivity must be a scalar or a 2x2 matrix")
    if not np.allclose(k, k.T) or np.linalg.eigvalsh(k).min() <= 0:
        raise FormError("conductivity must be symmetric positive definite")
    return k


@dataclass
class CoefficientSet:
    """Conductivity per subdomain, capacitance per interface pair, penalty and
    symmetry switch.  Scalars are promoted to isotropic tensors."""
    kappa: Mapping[int, object]
    capacitance: Mapping[tuple[int, int], float] | float = 1.0
    gamma: float = 20.0
    epsilon: int = 1
    kappa_penalty: bool = True

    def __post_init__(self):
        self.kappa = {int(i): _as_tensor(k) for i, k in dict(self.kappa).items()}
        if not self.gamma > 0:
            raise FormError("penalty gamma must be positive")
        if self.epsilon not in (-1, 0, 1):
            raise FormError("epsilon must be -1, 0 or 1")
        if not isinstance(self.capacitance, Mapping):
            if not self.capacitance > 0:
                raise FormError("capacitance must be positive")
        else:
            cap = {}
            for (i, j), c in self.capacitance.items():
                if not c > 0:
                    raise FormError("capacitance must be positive")
                cap[(min(i, j), max(i, j))] = float(c)
            self.capacitance = cap

    def kappa_of(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        missing = set(np.unique(labels).tolist()) - set(self.kappa)
        if missing:
            raise FormError(f"no conductivity for subdomains {sorted(missing)}")
        table = np.zeros((max(self.kappa) + 1, 2, 2))
        for i, k in self.kappa.items():
            table[i] = k
        return table[labels]

    def penalty_weight(self, *labels) -> np.ndarray:
        """kappa_F per facet: max eigenvalue over the given side labels (1 if unscaled)."""
        if not self.kappa_penalty:
            return np.ones(np.shape(labels[0]))
        lam = np.maximum.reduce([np.linalg.eigvalsh(self.kappa_of(l))[..., -1] for l in labels])
        return lam

    def capacitance_of(self, pair) -> float:
        if not isinstance(self.capacitance, Mapping):
            return float(self.capacitance)
        key = (min(pair), max(pair))
        if key not in self.capacitance:
            raise FormError(f"no capacitance for interface {key}")
        return self.capacitance[key]


class BCMode(enum.Enum):
    NEUMANN_MEAN = "neumann"        # zero flux, zero extracellular mean enforced
    DIRICHLET = "dirichlet"
    NEUMANN_DATA = "neumann_data"   # prescribed outward flux, zero-mean constraint


@dataclass
class BoundaryCondition:
    mode: BCMode = BCMode.NEUMANN_MEAN
    data: Callable | None = None   # g(x, y, t) for DIRICHLET / flux for NEUMANN_DATA

    @property
    def needs_mean_constraint(self) -> bool:
        return self.mode is not BCMode.DIRICHLET


@dataclass
class Sources:
    """Right-hand side data, all callables vectorised over points.

    volume(x, y, label, t)               paired with v
    membrane(x, y, nx, ny, l1, l2, t)    paired with [v] on the membrane
    membrane_second(...)                 paired with the trace of v from the
                                         second side (flux-continuity defect)
    boundary_flux(x, y, nx, ny, label, t) paired with v on the outer boundary
    dirichlet(x, y, label, t)            boundary values in Dirichlet mode
    """
    volume: Callable | None = None
    membrane: Callable | None = None
    membrane_second: Callable | None = None
    boundary_flux: Callable | None = None
    dirichlet: Callable | None = None


# ---------------------------------------------------------------------------
# assembly kernels

def _coo(shape, rows, cols, vals):
    return _canonical(sp.coo_matrix((np.concatenate(vals),
                                     (np.concatenate(rows), np.concatenate(cols))), shape=shape))


def _canonical(A) -> sp.csr_matrix:
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _volume_blocks(space: DgSpace, kappa_el: np.ndarray) -> np.ndarray:
    _, w, ref = space.element_quadrature(2 * space.k)
    g = space.physical_grads(np.arange(space.mesh.num_elements)[:, None],
                             space.basis.grads(ref)[None])  # (M, Q, nb, 2)
    return np.einsum("mq,mqai,mij,mqbj->mba", w, g, kappa_el, g, optimize=True)


def _facet_blocks(space: DgSpace, facets, kappa_side, penalty, epsilon):
    """2x2 blocks (test side, trial side) of the interior-facet terms."""
    s, w = line_rule(2 * space.k + 1)
    mesh = space.mesh
    length = mesh.facet_lengths[facets]
    n = mesh.facet_normals[facets]
    wq = length[:, None] * w[None, :]
    pen = penalty / length
    vals, flux = [], []
    for side in (0, 1):
        phi, grad = space.facet_traces(facets, side, s)
        vals.append(phi)
        flux.append(np.einsum("fqbi,fij,fj->fqb", grad, kappa_side[side], n))
    sign = (1.0, -1.0)
    blocks = {}
    for t in (0, 1):
        for r in (0, 1):
            b = (-0.5 * sign[t] * np.einsum("fq,fqa,fqb->fba", wq, flux[r], vals[t])
                 - epsilon * 0.5 * sign[r] * np.einsum("fq,fqb,fqa->fba", wq, flux[t], vals[r])
                 + (pen * sign[r] * sign[t])[:, None, None]
                 * np.einsum("fq,fqa,fqb->fba", wq, vals[r], vals[t]))
            blocks[t, r] = b
    return blocks


def _boundary_blocks(space: DgSpace, facets, kappa_b, penalty, epsilon):
    s, w = line_rule(2 * space.k + 1)
    mesh = space.mesh
    length = mesh.facet_lengths[facets]
    n = mesh.facet_normals[facets]
    wq = length[:, None] * w[None, :]
    phi, grad = space.facet_traces(facets, 0, s)
    flux = np.einsum("fqbi,fij,fj->fqb", grad, kappa_b, n)
    return (-np.einsum("fq,fqa,fqb->fba", wq, flux, phi)
            - epsilon * np.einsum("fq,fqb,fqa->fba", wq, flux, phi)
            + (penalty / length)[:, None, None] * np.einsum("fq,fqa,fqb->fba", wq, phi, phi))


def _assemble(space, kappa_el, kappa_facet, kappa_bnd, penalty, epsilon, dirichlet):
    mesh = space.mesh
    rows, cols, vals = [], [], []

    def add(blocks, el_test, el_trial):
        r = space.dofs(el_test)[:, :, None]
        c = space.dofs(el_trial)[:, None, :]
        rows.append(np.broadcast_to(r, blocks.shape).ravel())
        cols.append(np.broadcast_to(c, blocks.shape).ravel())
        vals.append(blocks.ravel())

    elements = np.arange(mesh.num_elements)
    add(_volume_blocks(space, kappa_el), elements, elements)
    kind = mesh.facet_kind
    inner = np.flatnonzero((kind == FacetKind.INTERIOR_INTRA) | (kind == FacetKind.INTERIOR_EXTRA))
    if len(inner):
        blocks = _facet_blocks(space, inner, kappa_facet(inner), penalty(inner), epsilon)
        fe = mesh.facet_elements[inner]
        for (t, r), b in blocks.items():
            add(b, fe[:, t], fe[:, r])
    if dirichlet:
        bnd = mesh.facets_of_kind(FacetKind.BOUNDARY)
        if len(bnd):
            b = _boundary_blocks(space, bnd, kappa_bnd(bnd), penalty(bnd), epsilon)
            el = mesh.facet_elements[bnd, 0]
            add(b, el, el)
    A = _coo((space.dim, space.dim), rows, cols, vals)
    if epsilon == 1:
        # symmetric in exact arithmetic; remove the summation-order roundoff
        A = _canonical((A + A.T) * 0.5)
    return A


def assemble_stiffness(space: DgSpace, coeff: CoefficientSet,
                       bc: BoundaryCondition | None = None) -> sp.csr_matrix:
    """Matrix of a_h (rows: test functions, columns: trial functions)."""
    bc = bc or BoundaryCondition()
    mesh = space.mesh
    fl = mesh.facet_labels

    def kappa_facet(f):
        return [coeff.kappa_of(fl[f, 0]), coeff.kappa_of(fl[f, 1])]

    def kappa_bnd(f):
        return coeff.kappa_of(fl[f, 0])

    def penalty(f):
        if mesh.facet_elements[f[0], 1] < 0:
            return coeff.gamma * coeff.penalty_weight(fl[f, 0])
        return coeff.gamma * coeff.penalty_weight(fl[f, 0], fl[f, 1])

    return _assemble(space, coeff.kappa_of(mesh.labels), kappa_facet, kappa_bnd,
                     penalty, coeff.epsilon, bc.mode is BCMode.DIRICHLET)


def assemble_stiffness_single_cell(space: DgSpace, kappa_i, kappa_e, gamma=20.0, epsilon=1,
                                   dirichlet=False, kappa_penalty=True) -> sp.csr_matrix:
    """a_h for the one-cell case (labels 0 and 1 only) with two fixed conductivities."""
    mesh = space.mesh
    if not set(mesh.subdomains) <= {0, 1}:
        raise FormError("single-cell assembly needs labels 0 and 1 only")
    ki, ke = _as_tensor(kappa_i), _as_tensor(kappa_e)

    def pick(lab):
        return np.where((np.asarray(lab) == 0)[:, None, None], ke, ki)

    lam_i, lam_e = np.linalg.eigvalsh(ki)[-1], np.linalg.eigvalsh(ke)[-1]

    def lam(lab):
        return np.where(np.asarray(lab) == 0, lam_e, lam_i)

    def penalty(f):
        if not kappa_penalty:
            return gamma * np.ones(len(f))
        if mesh.facet_elements[f[0], 1] < 0:
            return gamma * lam(fl[f, 0])
        return gamma * np.maximum(lam(fl[f, 0]), lam(fl[f, 1]))

    fl = mesh.facet_labels
    return _assemble(space, pick(mesh.labels), lambda f: [pick(fl[f, 0]), pick(fl[f, 1])],
                     lambda f: pick(fl[f, 0]), penalty, epsilon, dirichlet)


def interface_capacitance(iface: InterfaceSpace, coeff: CoefficientSet) -> np.ndarray:
    """C_M for every interface DOF."""
    pairs = iface.dof_pairs()
    if len(pairs) == 0:
        return np.zeros(0)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    cm = np.array([coeff.capacitance_of(tuple(p)) for p in uniq])
    return cm[inv.ravel()]


def assemble_membrane_mass(space: DgSpace, coeff: CoefficientSet,
                           iface: InterfaceSpace | None = None) -> sp.csr_matrix:
    """Matrix of (u, v) -> sum over interfaces of (C_M [u], [v])."""
    iface = iface or InterfaceSpace(space)
    J = iface.jump_operator
    M = (J.T @ sp.diags(interface_capacitance(iface, coeff)) @ J).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    return M


def dg_seminorm_operator(space: DgSpace, gamma: float = 20.0,
                         include_boundary: bool = False) -> sp.csr_matrix:
    """Matrix whose quadratic form is |u|_DG^2 (broken gradient plus penalised
    jumps over the non-membrane interior facets)."""
    eye = np.eye(2)
    mesh = space.mesh
    rows, cols, vals = [], [], []

    def add(blocks, el_test, el_trial):
        r = space.dofs(el_test)[:, :, None]
        c = space.dofs(el_trial)[:, None, :]
        rows.append(np.broadcast_to(r, blocks.shape).ravel())
        cols.append(np.broadcast_to(c, blocks.shape).ravel())
        vals.append(blocks.ravel())

    elements = np.arange(mesh.num_elements)
    add(_volume_blocks(space, np.broadcast_to(eye, (mesh.num_elements, 2, 2))),
        elements, elements)
    s, w = line_rule(2 * space.k)
    kind = mesh.facet_kind
    inner = np.flatnonzero((kind == FacetKind.INTERIOR_INTRA) | (kind == FacetKind.INTERIOR_EXTRA))
    sets = [(inner, (1.0, -1.0))]
    if include_boundary:
        sets.append((mesh.facets_of_kind(FacetKind.BOUNDARY), (1.0,)))
    for facets, sign in sets:
        if not len(facets):
            continue
        length = mesh.facet_lengths[facets]
        wq = (gamma / length)[:, None] * length[:, None] * w[None, :]
        phis = [space.facet_traces(facets, side, s)[0] for side in range(len(sign))]
        for t in range(len(sign)):
            for r in range(len(sign)):
                b = sign[t] * sign[r] * np.einsum("fq,fqa,fqb->fba", wq, phis[r], phis[t])
                add(b, mesh.facet_elements[facets, t], mesh.facet_elements[facets, r])
    return _coo((space.dim, space.dim), rows, cols, vals)


def dg_seminorm(space: DgSpace, field, gamma: float = 20.0, include_boundary: bool = False,
                boundary_data=None) -> float:
    """|u|_DG computed by quadrature (independent of the matrix path)."""
    mesh = space.mesh
    u = np.asarray(field).reshape(-1, space.nb)
    x, w, ref = space.element_quadrature(2 * space.k)
    g = space.physical_grads(np.arange(mesh.num_elements)[:, None], space.basis.grads(ref)[None])
    gu = np.einsum("mqbi,mb->mqi", g, u)
    total = float(np.sum(w * (gu ** 2).sum(-1)))
    kind = mesh.facet_kind
    s, wl = line_rule(2 * space.k)
    inner = np.flatnonzero((kind == FacetKind.INTERIOR_INTRA) | (kind == FacetKind.INTERIOR_EXTRA))
    if len(inner):
        v0 = np.einsum("fqb,fb->fq", space.facet_traces(inner, 0, s)[0],
                       u[mesh.facet_elements[inner, 0]])
        v1 = np.einsum("fqb,fb->fq", space.facet_traces(inner, 1, s)[0],
                       u[mesh.facet_elements[inner, 1]])
        total += float(np.sum(gamma * wl[None, :] * (v0 - v1) ** 2))
    if include_boundary:
        bnd = mesh.facets_of_kind(FacetKind.BOUNDARY)
        if len(bnd):
            v0 = np.einsum("fqb,fb->fq", space.facet_traces(bnd, 0, s)[0],
                           u[mesh.facet_elements[bnd, 0]])
            total += float(np.sum(gamma * wl[None, :] * v0 ** 2))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# loads

def assemble_load(space: DgSpace, sources: Sources | None, t: float = 0.0,
                  coeff: CoefficientSet | None = None,
                  bc: BoundaryCondition | None = None) -> np.ndarray:
    """Right-hand side vector for the data in ``sources`` at time ``t``."""
    mesh = space.mesh
    bc = bc or BoundaryCondition()
    F = np.zeros((mesh.num_elements, space.nb))
    if sources is None:
        return F.ravel()
    deg = space.quad_degree
    if sources.volume is not None:
        x, w, ref = space.element_quadrature(deg)
        lab = np.broadcast_to(mesh.labels[:, None], w.shape)
        f = np.broadcast_to(sources.volume(x[..., 0], x[..., 1], lab, t), w.shape)
        F += np.einsum("mq,qb->mb", w * f, space.basis.values(ref))
    s, wl = line_rule(deg)

    def facet_term(facets, side, func_vals, sign=1.0):
        length = mesh.facet_lengths[facets]
        phi, _ = space.facet_traces(facets, side, s)
        contrib = sign * np.einsum("fq,fqb->fb", length[:, None] * wl[None, :] * func_vals, phi)
        np.add.at(F, mesh.facet_elements[facets, side], contrib)

    mem = mesh.membrane_facets
    if len(mem) and (sources.membrane is not None or sources.membrane_second is not None):
        x = space.facet_points(mem, s)
        n = np.broadcast_to(mesh.facet_normals[mem][:, None, :], x.shape)
        l1 = np.broadcast_to(mesh.facet_labels[mem, 0][:, None], x.shape[:2])
        l2 = np.broadcast_to(mesh.facet_labels[mem, 1][:, None], x.shape[:2])
        if sources.membrane is not None:
            g = np.broadcast_to(sources.membrane(x[..., 0], x[..., 1], n[..., 0], n[..., 1],
                                                 l1, l2, t), x.shape[:2])
            facet_term(mem, 0, g, 1.0)
            facet_term(mem, 1, g, -1.0)
        if sources.membrane_second is not None:
            g = np.broadcast_to(sources.membrane_second(x[..., 0], x[..., 1], n[..., 0],
                                                        n[..., 1], l1, l2, t), x.shape[:2])
            facet_term(mem, 1, g, 1.0)

    bnd = mesh.facets_of_kind(FacetKind.BOUNDARY)
    if len(bnd):
        x = space.facet_points(bnd, s)
        n = np.broadcast_to(mesh.facet_normals[bnd][:, None, :], x.shape)
        lab = np.broadcast_to(mesh.facet_labels[bnd, 0][:, None], x.shape[:2])
        if bc.mode is BCMode.DIRICHLET:
            data = sources.dirichlet or (
                (lambda x_, y_, l_, t_: bc.data(x_, y_, t_)) if bc.data else None)
            if data is not None:
                if coeff is None:
                    raise FormError("Dirichlet load needs the coefficient set")
                g = np.broadcast_to(data(x[..., 0], x[..., 1], lab, t), x.shape[:2])
                length = mesh.facet_lengths[bnd]
                phi, grad = space.facet_traces(bnd, 0, s)
                kap = coeff.kappa_of(mesh.facet_labels[bnd, 0])
                flux = np.einsum("fqbi,fij,fj->fqb", grad, kap, mesh.facet_normals[bnd])
                wq = length[:, None] * wl[None, :]
                pen = coeff.gamma * coeff.penalty_weight(mesh.facet_labels[bnd, 0])
                contrib = (-coeff.epsilon * np.einsum("fq,fqb->fb", wq * g, flux)
                           + (pen / length)[:, None] * np.einsum("fq,fqb->fb", wq * g, phi))
                np.add.at(F, mesh.facet_elements[bnd, 0], contrib)
        else:
            data = sources.boundary_flux
            if data is None and bc.mode is BCMode.NEUMANN_DATA and bc.data is not None:
                data = lambda x_, y_, nx, ny, l_, t_: bc.data(x_, y_, t_)  # noqa: E731
            if data is not None:
                g = np.broadcast_to(data(x[..., 0], x[..., 1], n[..., 0], n[..., 1], lab, t),
                                    x.shape[:2])
                facet_term(bnd, 0, g)
    return F.ravel()


# ---------------------------------------------------------------------------
# errors

@dataclass
class ExactSolution:
    """Piecewise exact solution: ``value(x, y, label, t)`` and
    ``grad(x, y, label, t) -> (gx, gy)``."""
    value: Callable
    grad: Callable
    mean_free: bool = False   # compare modulo the extracellular mean


def error_norms(space: DgSpace, field, exact: ExactSolution, t: float,
                gamma: float = 20.0, include_boundary: bool = False,
                iface: InterfaceSpace | None = None) -> dict:
    """DG-seminorm, L2 and membrane-jump errors with quadrature of degree 2k+4."""
    mesh = space.mesh
    u = np.asarray(field).reshape(-1, space.nb)
    deg = 2 * space.k + 4
    x, w, ref = space.element_quadrature(deg)
    lab = np.broadcast_to(mesh.labels[:, None], w.shape)
    phi = space.basis.values(ref)
    uh = np.einsum("qb,mb->mq", phi, u)
    ue = np.broadcast_to(exact.value(x[..., 0], x[..., 1], lab, t), w.shape)
    shift = 0.0
    if exact.mean_free:
        ext = mesh.labels == 0
        area = w[ext].sum()
        shift = (w[ext] * (ue[ext] - uh[ext])).sum() / area
    err = uh - (ue - shift)
    l2 = float(np.sqrt(np.sum(w * err ** 2)))

    g = space.physical_grads(np.arange(mesh.num_elements)[:, None], space.basis.grads(ref)[None])
    guh = np.einsum("mqbi,mb->mqi", g, u)
    gx, gy = exact.grad(x[..., 0], x[..., 1], lab, t)
    ge = np.stack([np.broadcast_to(gx, w.shape), np.broadcast_to(gy, w.shape)], axis=-1)
    dg2 = float(np.sum(w * ((guh - ge) ** 2).sum(-1)))

    s, wl = line_rule(deg)
    kind = mesh.facet_kind
    inner = np.flatnonzero((kind == FacetKind.INTERIOR_INTRA) | (kind == FacetKind.INTERIOR_EXTRA))
    if len(inner):
        v0 = np.einsum("fqb,fb->fq", space.facet_traces(inner, 0, s)[0],
                       u[mesh.facet_elements[inner, 0]])
        v1 = np.einsum("fqb,fb->fq", space.facet_traces(inner, 1, s)[0],
                       u[mesh.facet_elements[inner, 1]])
        dg2 += float(np.sum(gamma * wl[None, :] * (v0 - v1) ** 2))
    if include_boundary:
        bnd = mesh.facets_of_kind(FacetKind.BOUNDARY)
        if len(bnd):
            xb = space.facet_points(bnd, s)
            lb = np.broadcast_to(mesh.facet_labels[bnd, 0][:, None], xb.shape[:2])
            v0 = np.einsum("fqb,fb->fq", space.facet_traces(bnd, 0, s)[0],
                           u[mesh.facet_elements[bnd, 0]])
            gb = exact.value(xb[..., 0], xb[..., 1], lb, t) - shift
            dg2 += float(np.sum(gamma * wl[None, :] * (v0 - gb) ** 2))

    jump_err = 0.0
    mem = mesh.membrane_facets
    if len(mem):
        xm = space.facet_points(mem, s)
        vals = []
        for side in (0, 1):
            el = mesh.facet_elements[mem, side]
            lm = np.broadcast_to(mesh.labels[el][:, None], xm.shape[:2])
            vh = np.einsum("fqb,fb->fq", space.facet_traces(mem, side, s)[0], u[el])
            vals.append(vh - exact.value(xm[..., 0], xm[..., 1], lm, t))
        d = vals[0] - vals[1]
        jump_err = float(np.sqrt(np.sum(mesh.facet_lengths[mem][:, None] * wl[None, :] * d ** 2)))
    return {"err_dg": float(np.sqrt(dg2)), "err_l2": l2, "err_jump": jump_err}


def export_matrix_market(A, path, symmetric: bool | None = None) -> None:
    """Write a sparse matrix in Matrix Market coordinate format (1-based)."""
    from scipy.io import mmwrite
    A = sp.csr_matrix(A)
    if symmetric is None:
        symmetric = (abs(A - A.T)).max() == 0 if A.nnz else True
    mmwrite(str(path), A.tocoo(), symmetry="symmetric" if symmetric else "general")


def import_matrix_market(path) -> sp.csr_matrix:
    from scipy.io import mmread
    return sp.csr_matrix(mmread(str(path)))
