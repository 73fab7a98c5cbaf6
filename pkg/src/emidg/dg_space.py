"""Broken polynomial spaces on a mesh and the membrane trace space."""
from __future__ import annotations

from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre

from .mesh import FacetKind, Mesh
from .quadrature import line_rule, triangle_rule


class ReferenceBasis:
    """Orthonormal modal basis of P_k on the reference triangle.

    Built by Gram-Schmidt (via Cholesky of the Gram matrix) from the monomials
    (x - 1/3)^a (y - 1/3)^b, a + b <= k, ordered by total degree.  Centring at
    the centroid and a second pass keep the basis orthonormal to rounding level.
    """

    centre = 1.0 / 3.0

    def __init__(self, k: int):
        if k < 0:
            raise ValueError("degree must be non-negative")
        self.k = k
        self.exponents = np.array([(d - j, j) for d in range(k + 1) for j in range(d + 1)])
        pts, w = triangle_rule(2 * k)
        m = self._monomials(pts)
        gram = (m * w[:, None]).T @ m
        # phi = C m with C = L^{-1}
        c = np.linalg.inv(np.linalg.cholesky(gram))
        self.coeffs = np.linalg.inv(np.linalg.cholesky(c @ gram @ c.T)) @ c

    @property
    def size(self) -> int:
        return len(self.exponents)

    def _monomials(self, pts):
        x, y = pts[..., 0, None] - self.centre, pts[..., 1, None] - self.centre
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        return x ** a * y ** b

    def _monomial_grads(self, pts):
        x, y = pts[..., 0, None] - self.centre, pts[..., 1, None] - self.centre
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        dx = np.where(a > 0, a * x ** np.maximum(a - 1, 0), 0.0) * y ** b
        dy = np.where(b > 0, b * y ** np.maximum(b - 1, 0), 0.0) * x ** a
        return np.stack([dx, dy], axis=-1)

    def values(self, pts):
        """Basis values, shape ``pts.shape[:-1] + (size,)``."""
        return self._monomials(np.asarray(pts, float)) @ self.coeffs.T

    def grads(self, pts):
        """Reference gradients, shape ``pts.shape[:-1] + (size, 2)``."""
        g = self._monomial_grads(np.asarray(pts, float))
        return np.einsum("ij,...jd->...id", self.coeffs, g)


@lru_cache(maxsize=None)
def reference_basis(k: int) -> ReferenceBasis:
    return ReferenceBasis(k)


def legendre_facet_values(k: int, s, length):
    """Orthonormal (w.r.t. arc length) Legendre basis on a facet of ``length``.

    ``s`` in [0, 1] is the facet parameter; returns shape ``(..., k + 1)``.
    """
    s = np.asarray(s, float)
    length = np.asarray(length, float)
    t = 2.0 * s - 1.0
    vals = np.stack([legendre.legval(t, np.eye(k + 1)[m]) for m in range(k + 1)], axis=-1)
    scale = np.sqrt((2 * np.arange(k + 1) + 1.0))
    return vals * scale / np.sqrt(length)[..., None]


class DgSpace:
    """V_h^k: piecewise P_k on every triangle, DOFs numbered element by element."""

    def __init__(self, mesh: Mesh, k: int):
        if k not in (1, 2, 3):
            raise ValueError("degree k must be 1, 2 or 3")
        self.mesh = mesh
        self.k = k
        self.basis = reference_basis(k)
        self.nb = self.basis.size
        p = mesh.vertices[mesh.triangles]
        self.origin = p[:, 0]
        self.jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        self.det = np.linalg.det(self.jac)
        self.jac_inv = np.linalg.inv(self.jac)
        self.quad_degree = 2 * k + 2

    @property
    def dim(self) -> int:
        return self.mesh.num_elements * self.nb

    def dofs(self, element) -> np.ndarray:
        element = np.asarray(element)
        return element[..., None] * self.nb + np.arange(self.nb)

    def to_physical(self, element, ref_pts):
        ref_pts = np.asarray(ref_pts, float)
        return self.origin[element] + np.einsum("...ij,...j->...i", self.jac[element], ref_pts)

    def to_reference(self, element, x):
        x = np.asarray(x, float)
        return np.einsum("...ij,...j->...i", self.jac_inv[element], x - self.origin[element])

    def element_quadrature(self, degree: int | None = None):
        """Physical quadrature points ``(M, Q, 2)``, weights ``(M, Q)`` and the
        reference points ``(Q, 2)``."""
        ref, w = triangle_rule(self.quad_degree if degree is None else degree)
        x = self.origin[:, None, :] + np.einsum("mij,qj->mqi", self.jac, ref)
        return x, np.abs(self.det)[:, None] * w[None, :], ref

    def physical_grads(self, element, ref_grads):
        """Map reference gradients ``(..., nb, 2)`` of ``element`` to physical ones."""
        # grad_x = B^{-T} grad_ref
        return np.einsum("...ji,...bj->...bi", self.jac_inv[element], ref_grads)

    # -- fields ----------------------------------------------------------
    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def eval(self, field, element: int, local_point) -> float | np.ndarray:
        """Value of ``field`` in ``element`` at reference coordinates ``local_point``."""
        if not 0 <= element < self.mesh.num_elements:
            raise IndexError(f"element {element} out of range")
        field = np.asarray(field)
        if field.shape != (self.dim,):
            raise ValueError("field length does not match the space dimension")
        vals = self.basis.values(local_point)
        return vals @ field[self.dofs(element)]

    def eval_physical(self, field, element, x):
        return self.eval(field, element, self.to_reference(element, x))

    def project(self, func, degree: int | None = None, per_label: bool = False) -> np.ndarray:
        """Element-wise L2 projection of ``func(x, y)`` (or ``func(x, y, label)``)."""
        x, w, ref = self.element_quadrature(degree)
        if per_label:
            lab = np.broadcast_to(self.mesh.labels[:, None], x.shape[:2])
            vals = func(x[..., 0], x[..., 1], lab)
        else:
            vals = func(x[..., 0], x[..., 1])
        vals = np.broadcast_to(np.asarray(vals, float), x.shape[:2])
        phi = self.basis.values(ref)  # (Q, nb)
        coef = np.einsum("mq,qb->mb", w * vals, phi) / np.abs(self.det)[:, None]
        return coef.ravel()

    def constant(self, value: float = 1.0) -> np.ndarray:
        return self.project(lambda x, y: np.full_like(x, value))

    def indicator(self, labels) -> np.ndarray:
        """Field equal to 1 on the given subdomain labels and 0 elsewhere."""
        mask = np.isin(self.mesh.labels, np.atleast_1d(labels)).astype(float)
        u = np.zeros((self.mesh.num_elements, self.nb))
        u[:, 0] = mask / self.basis.values(np.zeros(2))[0]
        return u.ravel()

    @cached_property
    def element_mass_diag(self) -> np.ndarray:
        """Diagonal of the (diagonal) mass matrix for the orthonormal basis."""
        return np.repeat(np.abs(self.det), self.nb)

    def mass_matrix(self, labels=None) -> sp.csr_matrix:
        d = self.element_mass_diag.copy()
        if labels is not None:
            keep = np.repeat(np.isin(self.mesh.labels, np.atleast_1d(labels)), self.nb)
            d[~keep] = 0.0
        return sp.diags(d).tocsr()

    def integral_row(self, labels) -> np.ndarray:
        """Vector b with b_j = integral of basis function j over the given subdomains."""
        b = np.zeros((self.mesh.num_elements, self.nb))
        phi0 = self.basis.values(np.zeros(2))[0]
        # the basis is orthogonal to constants, so only the first mode integrates to non-zero
        keep = np.isin(self.mesh.labels, np.atleast_1d(labels))
        b[keep, 0] = 0.5 * phi0 * np.abs(self.det[keep])
        return b.ravel()

    # -- facet traces ------------------------------------------------------
    def facet_points(self, facets, s):
        """Physical points ``(nF, Q, 2)`` at facet parameters ``s`` (from the
        first to the second stored facet vertex)."""
        fv = self.mesh.facets[facets]
        a = self.mesh.vertices[fv[:, 0]]
        b = self.mesh.vertices[fv[:, 1]]
        return a[:, None, :] + np.asarray(s)[None, :, None] * (b - a)[:, None, :]

    def facet_traces(self, facets, side: int, s):
        """Basis values ``(nF, Q, nb)`` and physical gradients ``(nF, Q, nb, 2)``
        of the element on ``side`` (0 or 1) of each facet."""
        facets = np.asarray(facets)
        el = self.mesh.facet_elements[facets, side]
        if np.any(el < 0):
            raise ValueError("facet has no element on the requested side")
        x = self.facet_points(facets, s)
        ref = self.to_reference(el[:, None], x)
        vals = self.basis.values(ref)
        grads = self.physical_grads(el[:, None], self.basis.grads(ref))
        return vals, grads


class InterfaceSpace:
    """Broken P_k on the membrane facets, orthonormal Legendre basis per facet."""

    def __init__(self, space: DgSpace):
        self.space = space
        self.mesh = space.mesh
        self.k = space.k
        self.nbf = self.k + 1
        self.facets = self.mesh.membrane_facets
        self.lengths = self.mesh.facet_lengths[self.facets]
        self.position = {int(f): i for i, f in enumerate(self.facets)}

    @property
    def dim(self) -> int:
        return len(self.facets) * self.nbf

    def dofs(self, local_facet):
        return np.asarray(local_facet)[..., None] * self.nbf + np.arange(self.nbf)

    def facet_labels(self) -> np.ndarray:
        """(first, second) side labels of each membrane facet."""
        return self.mesh.facet_labels[self.facets]

    def dof_pairs(self) -> np.ndarray:
        """Sorted label pair ``(i, j)`` of the interface carrying each DOF."""
        pairs = np.sort(self.facet_labels(), axis=1)
        return np.repeat(pairs, self.nbf, axis=0)

    def basis_values(self, s) -> np.ndarray:
        """``(nG, Q, k + 1)`` basis values at parameters ``s``."""
        return legendre_facet_values(self.k, np.asarray(s)[None, :], self.lengths[:, None])

    def quadrature(self, degree: int | None = None):
        s, w = line_rule(2 * self.k + 2 if degree is None else degree)
        pts = self.space.facet_points(self.facets, s)
        return s, pts, self.lengths[:, None] * w[None, :]

    def project(self, g, degree: int | None = None) -> np.ndarray:
        """Facet-wise L2 projection of ``g(x, y)`` onto the interface space."""
        s, pts, w = self.quadrature(degree)
        vals = np.broadcast_to(np.asarray(g(pts[..., 0], pts[..., 1]), float), w.shape)
        psi = self.basis_values(s)
        return np.einsum("fq,fqm->fm", w * vals, psi).ravel()

    def project_values(self, vals, s, w):
        """Projection from values ``(nG, Q)`` at facet parameters ``s``."""
        psi = self.basis_values(s)
        return np.einsum("fq,fqm->fm", self.lengths[:, None] * w[None, :] * vals, psi).ravel()

    def evaluate(self, coeffs, s) -> np.ndarray:
        """Values ``(nG, Q)`` of an interface function at facet parameters ``s``."""
        c = np.asarray(coeffs).reshape(-1, self.nbf)
        return np.einsum("fqm,fm->fq", self.basis_values(s), c)

    def l2_norm(self, coeffs, weights=None) -> float:
        c = np.asarray(coeffs)
        if weights is None:
            return float(np.sqrt(c @ c))
        return float(np.sqrt(c @ (np.asarray(weights) * c)))

    @cached_property
    def jump_operator(self) -> sp.csr_matrix:
        """Sparse J with ``J u`` = interface coefficients of the jump [u].

        The trace of a degree-k field on a facet is a degree-k polynomial, so
        the projection is exact and J maps V_h onto the interface space.
        """
        space = self.space
        s, w = line_rule(2 * self.k)
        psi = self.basis_values(s)  # (nG, Q, m)
        rows, cols, vals = [], [], []
        for side, sign in ((0, 1.0), (1, -1.0)):
            phi, _ = space.facet_traces(self.facets, side, s)  # (nG, Q, nb)
            blk = sign * np.einsum("fq,fqm,fqb->fmb", self.lengths[:, None] * w[None, :], psi, phi)
            el = self.mesh.facet_elements[self.facets, side]
            r = self.dofs(np.arange(len(self.facets)))[:, :, None]
            c = space.dofs(el)[:, None, :]
            rows.append(np.broadcast_to(r, blk.shape).ravel())
            cols.append(np.broadcast_to(c, blk.shape).ravel())
            vals.append(blk.ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.dim, space.dim))


def jump_trace(space: DgSpace, field, membrane_facet: int) -> np.ndarray:
    """Coefficients (orthonormal Legendre, length k+1) of the jump of ``field``
    on one membrane facet: trace from the first side minus the second side."""
    mesh = space.mesh
    if mesh.facet_kind[membrane_facet] != FacetKind.MEMBRANE:
        raise ValueError(f"facet {membrane_facet} is not a membrane facet")
    s, w = line_rule(2 * space.k)
    field = np.asarray(field)
    length = mesh.facet_lengths[membrane_facet]
    vals = 0.0
    for side, sign in ((0, 1.0), (1, -1.0)):
        phi, _ = space.facet_traces([membrane_facet], side, s)
        el = mesh.facet_elements[membrane_facet, side]
        vals = vals + sign * phi[0] @ field[space.dofs(el)]
    psi = legendre_facet_values(space.k, s, length)
    return (length * w * vals) @ psi
