"""Interface-conforming triangle meshes with subdomain labels.

Label 0 is the extracellular domain, labels ``i >= 1`` are cells.  Facets are
classified as interior-intracellular, interior-extracellular, membrane or
outer boundary.  For every two-sided facet the adjacent elements are stored in
a fixed order ``(first, second)`` and the stored unit normal points from the
first element into the second, so that ``[u] = u_first - u_second``.

For membrane facets the first side is chosen so that the jump is the
transmembrane potential: a cell comes before the extracellular domain, and of
two cells in contact the lower label comes first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.spatial import ConvexHull, QhullError


class MeshError(ValueError):
    """Invalid geometry parameters or a mesh violating an invariant."""


class NonConformingMeshError(MeshError):
    pass


class FacetKind(IntEnum):
    INTERIOR_INTRA = 0
    INTERIOR_EXTRA = 1
    MEMBRANE = 2
    BOUNDARY = 3


# local edge e of a triangle is opposite to local vertex e
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])

_OVERRIDE_NAMES = {"interior": None, "membrane": FacetKind.MEMBRANE,
                   "boundary": FacetKind.BOUNDARY}


def _side_key(label):
    # cells precede the extracellular domain when orienting membrane facets
    return np.where(label == 0, np.iinfo(np.int64).max, label)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    facet_overrides: Mapping[tuple[int, int], str] = field(default_factory=dict)

    # filled by ``classify_facets`` (called from __post_init__)
    facets: np.ndarray = field(init=False, repr=False)
    facet_elements: np.ndarray = field(init=False, repr=False)
    facet_local: np.ndarray = field(init=False, repr=False)
    facet_kind: np.ndarray = field(init=False, repr=False)
    facet_labels: np.ndarray = field(init=False, repr=False)
    facet_normals: np.ndarray = field(init=False, repr=False)
    facet_lengths: np.ndarray = field(init=False, repr=False)
    element_facets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (N, 2)")
        if t.ndim != 2 or t.shape[1] != 3 or lab.shape != (t.shape[0],):
            raise MeshError("triangles must have shape (M, 3) with one label each")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references a missing vertex")
        if lab.size and lab.min() < 0:
            raise MeshError("subdomain labels must be non-negative")
        area2 = _signed_area2(v, t)
        if np.any(np.abs(area2) <= 1e-14 * max(1.0, float(np.abs(v).max()) ** 2)):
            raise MeshError("degenerate (zero-area) triangle")
        t = t.copy()
        cw = area2 < 0
        t[cw] = t[cw][:, [0, 2, 1]]
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "triangles", _readonly(t))
        object.__setattr__(self, "labels", _readonly(lab))
        object.__setattr__(self, "facet_overrides", dict(self.facet_overrides))
        classify_facets(self)

    # -- basic geometry -------------------------------------------------
    @property
    def num_elements(self) -> int:
        return len(self.triangles)

    @property
    def num_facets(self) -> int:
        return len(self.facets)

    @property
    def subdomains(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.labels))

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * _signed_area2(self.vertices, self.triangles)

    @property
    def diameters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e = np.stack([p[:, 1] - p[:, 2], p[:, 2] - p[:, 0], p[:, 0] - p[:, 1]], axis=1)
        return np.linalg.norm(e, axis=2).max(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    def facets_of_kind(self, kind: FacetKind) -> np.ndarray:
        return np.flatnonzero(self.facet_kind == kind)

    @property
    def membrane_facets(self) -> np.ndarray:
        return self.facets_of_kind(FacetKind.MEMBRANE)

    def interface_pairs(self) -> list[tuple[int, int]]:
        """Sorted label pairs ``(i, j)``, ``i < j``, of all membrane interfaces."""
        m = self.membrane_facets
        pairs = np.sort(self.facet_labels[m], axis=1)
        return sorted({(int(a), int(b)) for a, b in pairs})

    def facet_class(self, f: int) -> tuple:
        """Readable class of facet ``f``, e.g. ``("membrane", 0, 1)``."""
        kind = FacetKind(self.facet_kind[f])
        a, b = (int(x) for x in self.facet_labels[f])
        if kind == FacetKind.MEMBRANE:
            return ("membrane", min(a, b), max(a, b))
        if kind == FacetKind.INTERIOR_INTRA:
            return ("interior_intra", a)
        if kind == FacetKind.INTERIOR_EXTRA:
            return ("interior_extra",)
        return ("boundary", a)

    def subdomain_area(self, label: int) -> float:
        return float(self.areas[self.labels == label].sum())


def _signed_area2(v, t):
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    d1, d2 = p1 - p0, p2 - p0
    return d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]


def classify_facets(mesh: Mesh) -> Mesh:
    """Build facet adjacency and classes in place (the mesh is otherwise frozen).

    Raises NonConformingMeshError when a facet is shared by more than two
    elements or when an element has more than one membrane facet (then the
    interface meets the element closure in more than one facet or vertex).
    """
    t = mesh.triangles
    nt = len(t)
    edges = t[:, LOCAL_EDGES].reshape(-1, 2)
    key = np.sort(edges, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    if np.any(counts > 2):
        raise NonConformingMeshError("a facet is shared by more than two elements")
    nf = len(uniq)
    elem = np.repeat(np.arange(nt), 3)
    loc = np.tile(np.arange(3), nt)
    order = np.argsort(inv, kind="stable")
    fe = np.full((nf, 2), -1, dtype=np.int64)
    fl = np.full((nf, 2), -1, dtype=np.int64)
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    fe[inv[order][first], 0] = elem[order][first]
    fl[inv[order][first], 0] = loc[order][first]
    fe[inv[order][~first], 1] = elem[order][~first]
    fl[inv[order][~first], 1] = loc[order][~first]

    lab = mesh.labels
    two = fe[:, 1] >= 0
    la = np.where(two, lab[fe[:, 0]], -1)
    lb = np.where(two, lab[np.maximum(fe[:, 1], 0)], -1)
    membrane = two & (la != lb)
    # orient membrane facets: first side has the smaller side key
    swap = membrane & (_side_key(lb) < _side_key(la))
    fe[swap] = fe[swap][:, ::-1]
    fl[swap] = fl[swap][:, ::-1]

    kind = np.full(nf, FacetKind.BOUNDARY, dtype=np.int64)
    l0 = lab[fe[:, 0]]
    l1 = np.where(two, lab[np.maximum(fe[:, 1], 0)], -1)
    kind[two & (l0 == l1) & (l0 == 0)] = FacetKind.INTERIOR_EXTRA
    kind[two & (l0 == l1) & (l0 > 0)] = FacetKind.INTERIOR_INTRA
    kind[membrane] = FacetKind.MEMBRANE

    # vertex pair stored in the orientation of the first element's edge
    fv = t[fe[:, 0][:, None], LOCAL_EDGES[fl[:, 0]]]
    p = mesh.vertices
    d = p[fv[:, 1]] - p[fv[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
    # ccw triangles: (d_y, -d_x) along a ccw edge points outward of the first element
    flabels = np.stack([l0, l1], axis=1)

    if mesh.facet_overrides:
        index = {tuple(k): i for i, k in enumerate(uniq.tolist())}
        for (a, b), name in mesh.facet_overrides.items():
            i = index.get((min(a, b), max(a, b)))
            if i is None:
                raise MeshError(f"override for unknown facet ({a}, {b})")
            want = _OVERRIDE_NAMES.get(name, "bad")
            if want == "bad":
                raise MeshError(f"unknown facet class {name!r}")
            got = FacetKind(kind[i])
            ok = (got == want) if want is not None else got in (
                FacetKind.INTERIOR_EXTRA, FacetKind.INTERIOR_INTRA)
            if not ok:
                raise MeshError(f"facet ({a}, {b}) override {name!r} contradicts topology")

    ef = np.empty((nt, 3), dtype=np.int64)
    ef[fe[:, 0], fl[:, 0]] = np.arange(nf)
    ef[fe[two, 1], fl[two, 1]] = np.flatnonzero(two)

    mem_count = np.zeros(nt, dtype=np.int64)
    np.add.at(mem_count, fe[membrane].ravel(), 1)
    if np.any(mem_count > 1):
        bad = int(np.flatnonzero(mem_count > 1)[0])
        raise NonConformingMeshError(
            f"element {bad} has more than one membrane facet; refine the mesh")

    for name, val in (("facets", fv), ("facet_elements", fe), ("facet_local", fl),
                      ("facet_kind", kind), ("facet_labels", flabels),
                      ("facet_normals", normal), ("facet_lengths", length),
                      ("element_facets", ef)):
        object.__setattr__(mesh, name, _readonly(val))
    return mesh


# ---------------------------------------------------------------------------
# structured generators

Region = Callable[[np.ndarray, np.ndarray], np.ndarray]


def structured_mesh(x0, y0, hx, hy, nx, ny, label: Region, active: Region | None = None,
                    diagonal: str = "right") -> Mesh:
    """Triangulate an ``nx`` x ``ny`` grid of rectangles.

    ``label(xc, yc)`` gives the subdomain of each grid square from its centre and
    ``active`` masks squares that belong to the domain.  Each square is split by
    one diagonal; where two adjacent sides of a square lie on an interface the
    diagonal is taken through their common corner so that no triangle touches
    the interface in two facets.
    """
    if diagonal not in ("right", "left"):
        raise MeshError("diagonal must be 'right' or 'left'")
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    xc = x0 + (ix + 0.5) * hx
    yc = y0 + (iy + 0.5) * hy
    act = np.ones((nx, ny), bool) if active is None else np.asarray(active(xc, yc), bool)
    lab = np.asarray(label(xc, yc), dtype=np.int64)
    lab = np.where(act, lab, -1)

    pad = np.full((nx + 2, ny + 2), -1, dtype=np.int64)
    pad[1:-1, 1:-1] = lab
    c = pad[1:-1, 1:-1]
    west = (pad[:-2, 1:-1] >= 0) & (pad[:-2, 1:-1] != c)
    east = (pad[2:, 1:-1] >= 0) & (pad[2:, 1:-1] != c)
    south = (pad[1:-1, :-2] >= 0) & (pad[1:-1, :-2] != c)
    north = (pad[1:-1, 2:] >= 0) & (pad[1:-1, 2:] != c)
    nsides = west.astype(int) + east + south + north
    if np.any(act & (nsides >= 3)):
        raise MeshError("interface not representable at this resolution "
                        "(a grid square has three interface sides)")

    # corners: 0=(i,j) sw, 1=(i+1,j) se, 2=(i+1,j+1) ne, 3=(i,j+1) nw
    # 'right' diagonal joins sw-ne, 'left' joins se-nw
    use_left = np.full((nx, ny), diagonal == "left")
    use_left[south & east] = True
    use_left[north & west] = True
    use_left[south & west] = False
    use_left[north & east] = False

    vid = lambda i, j: i * (ny + 1) + j  # noqa: E731
    sq = np.argwhere(act)
    i, j = sq[:, 0], sq[:, 1]
    sw, se, ne, nw = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    left = use_left[i, j]
    t1 = np.where(left[:, None], np.stack([sw, se, nw], 1), np.stack([sw, se, ne], 1))
    t2 = np.where(left[:, None], np.stack([se, ne, nw], 1), np.stack([sw, ne, nw], 1))
    tri = np.empty((2 * len(sq), 3), dtype=np.int64)
    tri[0::2], tri[1::2] = t1, t2
    labels = np.repeat(lab[i, j], 2)

    gx, gy = np.meshgrid(x0 + hx * np.arange(nx + 1), y0 + hy * np.arange(ny + 1), indexing="ij")
    allv = np.stack([gx.ravel(), gy.ravel()], axis=1)
    used, tri = np.unique(tri, return_inverse=True)
    tri = tri.reshape(-1, 3)
    return Mesh(allv[used], tri, labels)


@dataclass(frozen=True)
class GeometrySpec:
    """Named geometry with a resolution (grid squares per unit length, or per
    cell for ``sheet``) and geometry parameters.

    Names: ``square``, ``plus_cell``, ``lshape``, ``two_cell``, ``strip_cell``,
    ``strip_chain``, ``sheet``.
    """
    name: str
    resolution: int
    params: Mapping[str, float] = field(default_factory=dict)
    diagonal: str = "right"


def _plus(cx, cy, half, arm):
    def inside(x, y):
        return (((np.abs(x - cx) < half) & (np.abs(y - cy) < arm / 2))
                | ((np.abs(y - cy) < half) & (np.abs(x - cx) < arm / 2)))
    return inside


def _need_multiple(n, m, name):
    if n < 1:
        raise MeshError("resolution must be >= 1")
    if n % m:
        raise MeshError(f"{name}: resolution must be a multiple of {m} to resolve the interface")


def build(spec: GeometrySpec) -> Mesh:
    n, p, name = int(spec.resolution), dict(spec.params), spec.name
    if n < 1:
        raise MeshError("resolution must be >= 1")
    if name == "square":
        return structured_mesh(0.0, 0.0, 1.0 / n, 1.0 / n, n, n,
                               lambda x, y: np.zeros_like(x, dtype=int), diagonal=spec.diagonal)
    if name == "plus_cell":
        _need_multiple(n, 8, name)
        plus = _plus(0.5, 0.5, 0.375, 0.25)
        return structured_mesh(0.0, 0.0, 1.0 / n, 1.0 / n, n, n,
                               lambda x, y: plus(x, y).astype(int), diagonal=spec.diagonal)
    if name == "lshape":
        _need_multiple(n, 4, name)

        def label(x, y):
            return ((x > 0.25) & (x < 0.75) & (y > 0.25) & (y < 0.75)).astype(int)

        def active(x, y):
            return ~((x < 0) & (y < 0))
        return structured_mesh(-1.0, -1.0, 1.0 / n, 1.0 / n, 2 * n, 2 * n, label, active,
                               diagonal=spec.diagonal)
    if name == "two_cell":
        _need_multiple(n, 8, name)

        def label(x, y):
            inb = (y > 0.25) & (y < 0.75)
            return np.where(inb & (x > 0.25) & (x < 0.5), 1,
                            np.where(inb & (x > 0.5) & (x < 0.75), 2, 0))
        return structured_mesh(0.0, 0.0, 1.0 / n, 1.0 / n, n, n, label, diagonal=spec.diagonal)
    if name in ("strip_cell", "strip_chain"):
        _need_multiple(n, 4, name)
        L = p.get("L", 2)
        if L != int(L) or L < 1:
            raise MeshError("strip length L must be a positive integer")
        L = int(L)

        def label(x, y):
            inside = (x > 0.25) & (x < L - 0.25) & (y > 0.25) & (y < 0.75)
            if name == "strip_cell":
                return inside.astype(int)
            return np.where(inside, np.clip(np.floor(x).astype(int), 0, L - 1) + 1, 0)
        return structured_mesh(0.0, 0.0, 1.0 / n, 1.0 / n, L * n, n, label,
                               diagonal=spec.diagonal)
    if name == "sheet":
        _need_multiple(n, 6, name)
        rows, cols = int(p.get("rows", 3)), int(p.get("cols", 3))
        w = float(p.get("cell_size", 1.0))
        if rows < 1 or cols < 1 or w <= 0:
            raise MeshError("sheet needs rows, cols >= 1 and cell_size > 0")
        links = p.get("links", "tree")
        if links not in ("tree", "grid"):
            raise MeshError("sheet links must be 'tree' or 'grid'")
        hs = w / n
        margin = n // 3

        def label(x, y):
            px, py = np.floor(x / w), np.floor(y / w)
            inside_box = (px >= 0) & (px < cols) & (py >= 0) & (py < rows)
            lx, ly = x - (px + 0.5) * w, y - (py + 0.5) * w
            reach = np.full(np.shape(x), w / 2)
            if links == "tree":
                # vertical contacts only in column 0: a cycle of cells would
                # seal off an extracellular pocket in 2D
                cut = (px > 0) & (((ly > 0) & (py < rows - 1)) | ((ly < 0) & (py > 0)))
                reach = np.where(cut, w / 3, reach)
            plus = (((np.abs(lx) < w / 6) & (np.abs(ly) < reach)) | (np.abs(ly) < w / 6)) & inside_box
            # cells numbered row by row from the bottom-left, starting at 1
            idx = (py * cols + px + 1).astype(int)
            return np.where(plus, idx, 0)
        nx, ny = cols * n + 2 * margin, rows * n + 2 * margin
        return structured_mesh(-margin * hs, -margin * hs, hs, hs, nx, ny, label,
                               diagonal=spec.diagonal)
    raise MeshError(f"unknown geometry {name!r}")


def sheet_cell_index(row: int, col: int, cols: int) -> int:
    return row * cols + col + 1


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle is split into four by its edge midpoints."""
    t = mesh.triangles
    nv = len(mesh.vertices)
    ef = mesh.element_facets
    mids = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    m = nv + ef  # midpoint of local edge e (opposite vertex e)
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mbc, mca, mab = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.stack([a, mab, mca], 1),
        np.stack([mab, b, mbc], 1),
        np.stack([mca, mbc, c], 1),
        np.stack([mab, mbc, mca], 1),
    ], axis=1).reshape(-1, 3)
    labels = np.repeat(mesh.labels, 4)
    overrides = {}
    if mesh.facet_overrides:
        index = {tuple(sorted(k)): i for i, k in enumerate(mesh.facets.tolist())}
        for (p, q), name in mesh.facet_overrides.items():
            mid = nv + index[(min(p, q), max(p, q))]
            overrides[(p, mid)] = name
            overrides[(mid, q)] = name
    return Mesh(verts, children, labels, overrides)


def refine(mesh: Mesh, times: int) -> Mesh:
    for _ in range(times):
        mesh = refine_uniform(mesh)
    return mesh


def subdomain_diameter(mesh: Mesh, label: int) -> float:
    """Euclidean diameter of the vertex set of subdomain ``label``."""
    sel = mesh.labels == label
    if not np.any(sel):
        raise MeshError(f"unknown subdomain label {label}")
    pts = mesh.vertices[np.unique(mesh.triangles[sel])]
    try:
        pts = pts[ConvexHull(pts).vertices]
    except QhullError:
        pass
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


# ---------------------------------------------------------------------------
# plain-text mesh files

MAGIC = "EMIDG-MESH 1"


def write_mesh(mesh: Mesh, path) -> None:
    """Write vertex table, labelled triangle table and facet overrides.

    Coordinates are written with ``repr`` so reading back is bit-exact.
    """
    lines = [MAGIC, f"vertices {len(mesh.vertices)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {mesh.num_elements}")
    lines += [f"{a} {b} {c} {lab}" for (a, b, c), lab in
              zip(mesh.triangles.tolist(), mesh.labels.tolist())]
    lines.append(f"facet_overrides {len(mesh.facet_overrides)}")
    lines += [f"{a} {b} {name}" for (a, b), name in sorted(mesh.facet_overrides.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    it = iter(Path(path).read_text().splitlines())

    def header(word):
        tok = next(it).split()
        if len(tok) != 2 or tok[0] != word:
            raise MeshError(f"expected '{word} <count>' section")
        return int(tok[1])

    if next(it).strip() != MAGIC:
        raise MeshError("not an EMIDG mesh file")
    nv = header("vertices")
    verts = np.array([[float(s) for s in next(it).split()] for _ in range(nv)]).reshape(nv, 2)
    nt = header("triangles")
    rows = np.array([[int(s) for s in next(it).split()] for _ in range(nt)],
                    dtype=np.int64).reshape(nt, 4)
    overrides = {}
    try:
        no = header("facet_overrides")
    except StopIteration:
        no = 0
    for _ in range(no):
        a, b, name = next(it).split()
        overrides[(int(a), int(b))] = name
    return Mesh(verts, rows[:, :3], rows[:, 3], overrides)


def analytic_area(spec: GeometrySpec) -> float:
    """Domain area of a named geometry (used by tests and sanity checks)."""
    p = dict(spec.params)
    if spec.name in ("square", "plus_cell", "two_cell"):
        return 1.0
    if spec.name == "lshape":
        return 3.0
    if spec.name in ("strip_cell", "strip_chain"):
        return float(p.get("L", 2))
    if spec.name == "sheet":
        w = float(p.get("cell_size", 1.0))
        rows, cols = int(p.get("rows", 3)), int(p.get("cols", 3))
        return (cols * w + 2 * w / 3) * (rows * w + 2 * w / 3)
    raise MeshError(f"unknown geometry {spec.name!r}")


def analytic_interface_length(spec: GeometrySpec) -> float:
    p = dict(spec.params)
    if spec.name == "square":
        return 0.0
    if spec.name == "plus_cell":
        return 12 * 0.25
    if spec.name == "lshape":
        return 2.0
    if spec.name == "two_cell":
        return 2 * (0.25 + 0.5) * 2 - 0.5
    if spec.name == "strip_cell":
        L = float(p.get("L", 2))
        return 2 * (L - 0.5) + 2 * 0.5
    if spec.name == "strip_chain":
        L = int(p.get("L", 2))
        return 2 * (L - 0.5) + 2 * 0.5 + (L - 1) * 0.5
    if spec.name == "sheet":
        w = float(p.get("cell_size", 1.0))
        rows, cols = int(p.get("rows", 3)), int(p.get("cols", 3))
        # each plus has perimeter 4 w; shared arm tips (w/3) are counted once
        vertical = cols if p.get("links", "tree") == "grid" else 1
        shared = (rows * (cols - 1) + vertical * (rows - 1)) * w / 3
        # every shortened arm loses 2 x w/6 of side length
        cut = 2 * (cols - vertical) * (rows - 1) * w / 3
        return rows * cols * 4 * w - shared - cut
    raise MeshError(f"unknown geometry {spec.name!r}")


def polygon_diameter(points) -> float:
    pts = np.asarray(points, float)
    return max(math.dist(a, b) for a in pts for b in pts)
