"""Conforming simplicial meshes of polygonal 2D domains.

Provides the built-in structured unit-square triangulation (a nested,
quasi-uniform family), a small ASCII import/export format, and full facet
topology with deterministic orientation:

* every facet stores its neighbor elements as (plus, minus) where the plus
  side is the neighbor with the larger element id,
* the facet normal is unit length and points from the minus side into the
  plus side (outward from the minus element); on boundary facets it is the
  outward domain normal of the single neighbor.

Meshes are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "FacetRecord",
    "MeshReport",
    "MeshError",
    "build_structured_mesh",
    "import_mesh",
    "export_mesh",
    "validate",
]

_AREA_TOL = 1e-14


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


@dataclass(frozen=True)
class FacetRecord:
    """Single-facet view of the facet arrays."""

    index: int
    vertices: tuple[int, int]
    elem_plus: int
    elem_minus: int  # -1 on boundary facets
    normal: np.ndarray
    length: float
    local_plus: int
    local_minus: int  # -1 on boundary facets

    @property
    def on_boundary(self) -> bool:
        return self.elem_minus < 0


@dataclass
class MeshReport:
    """Conformity, orientation and shape-regularity statistics."""

    n_vertices: int
    n_elements: int
    n_facets: int
    n_interior_facets: int
    area_total: float
    conforming: bool
    orientation_ok: bool
    min_angle_deg: float
    max_shape_ratio: float
    max_diameter_over_facet: float

    def __str__(self) -> str:
        return (
            f"mesh: {self.n_elements} elements, {self.n_vertices} vertices, "
            f"{self.n_facets} facets ({self.n_interior_facets} interior)\n"
            f"area={self.area_total:.17g} conforming={self.conforming} "
            f"orientation_ok={self.orientation_ok}\n"
            f"min angle={self.min_angle_deg:.4f} deg, "
            f"max circum/in radius={self.max_shape_ratio:.6g}, "
            f"max h_E/h_e={self.max_diameter_over_facet:.6g}"
        )


@dataclass
class Mesh:
    """Conforming triangulation with oriented facet topology.

    Attributes
    ----------
    vertices : (nv, 2) float array
    elements : (ne, 3) int array, counter-clockwise vertex triples
    facet_vertices : (nf, 2) int array, each row sorted ascending
    facet_elems : (nf, 2) int array, columns (plus, minus); minus is -1 on
        boundary facets
    facet_local : (nf, 2) int array, local facet index (0..2) of the facet
        within the plus / minus neighbor; -1 where absent
    facet_normals : (nf, 2) unit normals, minus-to-plus orientation
    facet_lengths : (nf,) facet lengths h_e
    elem_facets : (ne, 3) facet id of local facet l = edge (v_l, v_{l+1})
    areas, diameters, shape_ratios : per-element geometry
    cell_size : structured cell side 1/n, or None for imported meshes
    """

    vertices: np.ndarray
    elements: np.ndarray
    facet_vertices: np.ndarray
    facet_elems: np.ndarray
    facet_local: np.ndarray
    facet_normals: np.ndarray
    facet_lengths: np.ndarray
    elem_facets: np.ndarray
    areas: np.ndarray
    diameters: np.ndarray
    shape_ratios: np.ndarray
    bbox: tuple[float, float, float, float]
    structured_n: int | None = None
    split: str | None = None
    _boundary: np.ndarray = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facet_vertices.shape[0]

    @property
    def h(self) -> float:
        """Global mesh size: max element diameter."""
        return float(self.diameters.max())

    @property
    def cell_size(self) -> float | None:
        """Structured cell side 1/n (the h_j labelling of the mesh family)."""
        if self.structured_n is None:
            return None
        return 1.0 / self.structured_n

    @property
    def boundary_mask(self) -> np.ndarray:
        return self._boundary

    @property
    def domain_area(self) -> float:
        return float(self.areas.sum())

    def facet(self, i: int) -> FacetRecord:
        return FacetRecord(
            index=i,
            vertices=(int(self.facet_vertices[i, 0]), int(self.facet_vertices[i, 1])),
            elem_plus=int(self.facet_elems[i, 0]),
            elem_minus=int(self.facet_elems[i, 1]),
            normal=self.facet_normals[i].copy(),
            length=float(self.facet_lengths[i]),
            local_plus=int(self.facet_local[i, 0]),
            local_minus=int(self.facet_local[i, 1]),
        )

    def element_coords(self, e: int | np.ndarray) -> np.ndarray:
        """Vertex coordinates of element(s) e, shape (..., 3, 2)."""
        return self.vertices[self.elements[e]]


def _signed_areas(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = vertices[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _outward_normal(p: np.ndarray, a: int, b: int) -> np.ndarray:
    """Outward unit normal of a CCW triangle p on directed edge (a, b)."""
    t = p[b] - p[a]
    n = np.array([t[1], -t[0]])
    return n / np.linalg.norm(n)


def _build_topology(vertices: np.ndarray, elements: np.ndarray,
                    structured_n: int | None = None,
                    split: str | None = None) -> Mesh:
    ne = elements.shape[0]
    sa = _signed_areas(vertices, elements)
    scale = max(np.ptp(vertices, axis=0).max() ** 2, 1.0)
    if np.any(np.abs(sa) <= _AREA_TOL * scale):
        bad = int(np.argmin(np.abs(sa)))
        raise MeshError(f"degenerate (zero-area) element {bad}")
    if np.any(sa < 0):
        raise MeshError("clockwise element reached topology build")

    tri_sorted = np.sort(elements, axis=1)
    _, counts = np.unique(tri_sorted, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise MeshError("duplicated element (non-conforming topology)")

    # Facets in deterministic first-appearance order over (element, local edge).
    facet_of: dict[tuple[int, int], int] = {}
    fverts: list[tuple[int, int]] = []
    neighbors: list[list[tuple[int, int]]] = []
    elem_facets = np.empty((ne, 3), dtype=np.int64)
    for e in range(ne):
        for loc in range(3):
            a = int(elements[e, loc])
            b = int(elements[e, (loc + 1) % 3])
            key = (a, b) if a < b else (b, a)
            fid = facet_of.get(key)
            if fid is None:
                fid = len(fverts)
                facet_of[key] = fid
                fverts.append(key)
                neighbors.append([])
            neighbors[fid].append((e, loc))
            elem_facets[e, loc] = fid

    nf = len(fverts)
    facet_vertices = np.asarray(fverts, dtype=np.int64)
    facet_elems = np.full((nf, 2), -1, dtype=np.int64)
    facet_local = np.full((nf, 2), -1, dtype=np.int64)
    facet_normals = np.empty((nf, 2))
    boundary = np.zeros(nf, dtype=bool)

    for f, nbrs in enumerate(neighbors):
        if len(nbrs) > 2:
            raise MeshError(
                f"facet {facet_vertices[f]} shared by {len(nbrs)} elements "
                "(non-conforming topology)")
        if len(nbrs) == 1:
            (e, loc) = nbrs[0]
            facet_elems[f] = (e, -1)
            facet_local[f] = (loc, -1)
            facet_normals[f] = _outward_normal(vertices[elements[e]], loc, (loc + 1) % 3)
            boundary[f] = True
        else:
            (e1, l1), (e2, l2) = nbrs
            if e1 > e2:
                (e1, l1), (e2, l2) = (e2, l2), (e1, l1)
            # plus = larger id; normal points out of the minus element
            facet_elems[f] = (e2, e1)
            facet_local[f] = (l2, l1)
            facet_normals[f] = _outward_normal(vertices[elements[e1]], l1, (l1 + 1) % 3)

    edge = vertices[facet_vertices[:, 1]] - vertices[facet_vertices[:, 0]]
    facet_lengths = np.linalg.norm(edge, axis=1)

    p = vertices[elements]
    e01 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    e12 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    e20 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    edges = np.stack([e01, e12, e20], axis=1)
    diameters = edges.max(axis=1)
    areas = sa  # all positive here
    semi = 0.5 * edges.sum(axis=1)
    inradius = areas / semi
    circum = edges.prod(axis=1) / (4.0 * areas)
    shape_ratios = circum / inradius

    xmin, ymin = vertices.min(axis=0)
    xmax, ymax = vertices.max(axis=0)
    return Mesh(
        vertices=vertices, elements=elements,
        facet_vertices=facet_vertices, facet_elems=facet_elems,
        facet_local=facet_local, facet_normals=facet_normals,
        facet_lengths=facet_lengths, elem_facets=elem_facets,
        areas=areas, diameters=diameters, shape_ratios=shape_ratios,
        bbox=(float(xmin), float(ymin), float(xmax), float(ymax)),
        structured_n=structured_n, split=split, _boundary=boundary,
    )


def from_arrays(vertices: np.ndarray, elements: np.ndarray,
                reorient: bool = False, **meta) -> Mesh:
    """Build a validated mesh from raw arrays.

    With ``reorient=True``, clockwise triangles are flipped with a warning;
    otherwise they raise :class:`MeshError`.
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (nv, 2) array")
    if elements.ndim != 2 or elements.shape[1] != 3:
        raise MeshError("elements must be an (ne, 3) array")
    if elements.min(initial=0) < 0 or elements.max(initial=-1) >= len(vertices):
        raise MeshError("element vertex index out of range")
    sa = _signed_areas(vertices, elements)
    cw = sa < 0
    if np.any(cw):
        if not reorient:
            raise MeshError(f"{int(cw.sum())} clockwise element(s)")
        warnings.warn(
            f"reoriented {int(cw.sum())} clockwise element(s)", stacklevel=2)
        elements = elements.copy()
        elements[cw] = elements[cw][:, [0, 2, 1]]
    return _build_topology(vertices, elements, **meta)


def build_structured_mesh(n: int, split: str = "lower-left") -> Mesh:
    """Structured triangulation of the unit square with n cells per side.

    Every cell is split along the lower-left to upper-right diagonal, which
    makes the family {mesh(2^j)} nested: each triangle of mesh(n) is the
    union of four triangles of mesh(2n).

    Returns a mesh with 2 n^2 elements and global h = sqrt(2)/n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if split != "lower-left":
        raise ValueError(f"unknown split rule {split!r}")
    xs = np.linspace(0.0, 1.0, n + 1)
    xv, yv = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([xv.ravel(), yv.ravel()])

    def vid(ix, iy):
        return iy * (n + 1) + ix

    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    eid = 0
    for iy in range(n):
        for ix in range(n):
            v00 = vid(ix, iy)
            v10 = vid(ix + 1, iy)
            v01 = vid(ix, iy + 1)
            v11 = vid(ix + 1, iy + 1)
            elements[eid] = (v00, v10, v11)      # lower triangle
            elements[eid + 1] = (v00, v11, v01)  # upper triangle
            eid += 2
    mesh = _build_topology(vertices, elements, structured_n=n, split="lower-left")
    # quasi-uniformity of the built-in family
    ratio = mesh.diameters[mesh.facet_elems[:, 0]] / mesh.facet_lengths
    assert ratio.max() <= 10.0
    return mesh


def validate(mesh: Mesh) -> MeshReport:
    """Report conformity, orientation and shape-regularity statistics.

    Never raises: problems are flagged in the report.
    """
    nf = mesh.n_facets
    interior = ~mesh.boundary_mask

    conforming = True
    seen = np.zeros(nf, dtype=np.int64)
    for e in range(mesh.n_elements):
        for loc in range(3):
            seen[mesh.elem_facets[e, loc]] += 1
    if np.any(seen[interior] != 2) or np.any(seen[~interior] != 1):
        conforming = False

    orientation_ok = True
    for f in range(nf):
        ep, em = mesh.facet_elems[f]
        ref_elem = em if em >= 0 else ep
        loc = mesh.facet_local[f, 1] if em >= 0 else mesh.facet_local[f, 0]
        n_ref = _outward_normal(mesh.vertices[mesh.elements[ref_elem]],
                                loc, (loc + 1) % 3)
        if np.linalg.norm(n_ref - mesh.facet_normals[f]) > 1e-14 or \
                abs(np.linalg.norm(mesh.facet_normals[f]) - 1.0) > 1e-14:
            orientation_ok = False

    p = mesh.vertices[mesh.elements]
    angles = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cosang = (u * v).sum(axis=1) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    min_angle = float(np.min(angles))

    hE_over_he = mesh.diameters[mesh.facet_elems[:, 0]] / mesh.facet_lengths
    hm = mesh.facet_elems[:, 1]
    both = hm >= 0
    hE_over_he = np.concatenate(
        [hE_over_he, mesh.diameters[hm[both]] / mesh.facet_lengths[both]])

    return MeshReport(
        n_vertices=mesh.n_vertices,
        n_elements=mesh.n_elements,
        n_facets=nf,
        n_interior_facets=int(interior.sum()),
        area_total=mesh.domain_area,
        conforming=conforming,
        orientation_ok=orientation_ok,
        min_angle_deg=min_angle,
        max_shape_ratio=float(mesh.shape_ratios.max()),
        max_diameter_over_facet=float(hE_over_he.max()),
    )


def export_mesh(mesh: Mesh, path) -> None:
    """Write the ASCII format: header, vertices, elements (17 significant digits)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("hdgmesh 2d\n")
        fh.write(f"{mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.16e} {y:.16e}\n")
        fh.write(f"{mesh.n_elements}\n")
        for i, j, k in mesh.elements:
            fh.write(f"{i} {j} {k}\n")


def import_mesh(path) -> Mesh:
    """Read the ASCII node/element format and build a validated mesh.

    Clockwise triangles are auto-reoriented with a warning. Raises
    :class:`MeshError` on parse failures, non-conforming topology, or
    degenerate elements.
    """
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    try:
        magic, dim = next(it), next(it)
        if magic != "hdgmesh" or dim != "2d":
            raise MeshError(f"bad header: {magic} {dim}")
        nv = int(next(it))
        vertices = np.array(
            [[float(next(it)), float(next(it))] for _ in range(nv)])
        ne = int(next(it))
        elements = np.array(
            [[int(next(it)), int(next(it)), int(next(it))] for _ in range(ne)],
            dtype=np.int64)
    except (StopIteration, ValueError) as exc:
        raise MeshError(f"parse failure in {path}: {exc}") from exc
    return from_arrays(vertices, elements, reorient=True)
