"""Broken polynomial spaces on a triangulation.

Element space: discontinuous degree-k polynomials per triangle. Facet space:
degree-k polynomials per facet. A coefficient vector over the product space
stacks all element blocks first, then all facet blocks (see :class:`DofMap`).

Basis normalization convention
------------------------------
Reference quadrature weights are normalized to sum to one, so a physical
integral is ``|E| * sum(w_q * f(x_q))``. Bases are orthonormalized against
this unit-mass reference measure; on the reference triangle the first basis
function is the constant ``1/sqrt(2*area_ref) = 1``. The physical element
basis is the reference basis scaled by ``1/sqrt(|E|)`` (and ``1/sqrt(h_e)``
on facets), which makes every element and facet mass block the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

from .mesh import Mesh

__all__ = [
    "QuadratureRule",
    "DofMap",
    "PairField",
    "FeSpace",
    "triangle_rule",
    "segment_rule",
    "element_basis",
    "facet_basis",
]


# ---------------------------------------------------------------------------
# quadrature


def segment_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule on [0, 1] exact to the given degree, weights summing to 1."""
    npts = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(npts)
    return (x + 1.0) / 2.0, w / 2.0


def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed product Gauss rule on the reference triangle.

    Reference triangle (0,0)-(1,0)-(0,1); weights are positive and sum to 1
    (unit-mass convention), so that ``int_E f = |E| * sum(w*f)``.
    """
    n = (degree + 2 + 1) // 2  # the Duffy factor (1-u) raises the u-degree by 1
    u, wu = np.polynomial.legendre.leggauss(n)
    u = (u + 1.0) / 2.0
    wu = wu / 2.0
    uu, vv = np.meshgrid(u, u, indexing="ij")
    x = uu.ravel()
    y = (vv * (1.0 - uu)).ravel()
    w = 2.0 * (np.outer(wu * (1.0 - u), wu)).ravel()
    return np.column_stack([x, y]), w


@dataclass(frozen=True)
class QuadratureRule:
    """Reference rules for triangle and segment, unit-mass weights."""

    tri_points: np.ndarray
    tri_weights: np.ndarray
    tri_degree: int
    seg_points: np.ndarray
    seg_weights: np.ndarray
    seg_degree: int

    @classmethod
    def for_degree(cls, k: int) -> "QuadratureRule":
        # element rule handles the quartic nonlinearity of degree-k fields
        tri_deg = max(4 * k, 2 * k + 2)
        seg_deg = 2 * k + 2
        tp, tw = triangle_rule(tri_deg)
        sp, sw = segment_rule(seg_deg)
        return cls(tp, tw, tri_deg, sp, sw, seg_deg)


def subdivide_triangle_rule(points: np.ndarray, weights: np.ndarray,
                            levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Replicate a reference-triangle rule onto 4^levels red-refined children."""
    pts, wts = points, weights
    for _ in range(levels):
        corners = np.array([
            [[0, 0], [0.5, 0], [0, 0.5]],
            [[0.5, 0], [1, 0], [0.5, 0.5]],
            [[0, 0.5], [0.5, 0.5], [0, 1]],
            [[0.5, 0], [0.5, 0.5], [0, 0.5]],
        ], dtype=float)
        new_pts = []
        for c in corners:
            a, b, d = c
            new_pts.append(a + np.outer(pts[:, 0], b - a) + np.outer(pts[:, 1], d - a))
        pts = np.vstack(new_pts)
        wts = np.tile(wts / 4.0, 4)
    return pts, wts


def subdivide_segment_rule(points: np.ndarray, weights: np.ndarray,
                           levels: int) -> tuple[np.ndarray, np.ndarray]:
    pts, wts = points, weights
    for _ in range(levels):
        pts = np.concatenate([pts / 2.0, 0.5 + pts / 2.0])
        wts = np.tile(wts / 2.0, 2)
    return pts, wts


# ---------------------------------------------------------------------------
# orthonormal bases


def _tri_monomial_exponents(k: int) -> np.ndarray:
    out = [(d - j, j) for d in range(k + 1) for j in range(d + 1)]
    return np.asarray(out, dtype=np.int64)


def _tri_monomial_integral(a: int, b: int) -> float:
    # exact integral of x^a y^b over the reference triangle
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def _orthonormalize(gram: np.ndarray) -> np.ndarray:
    """Coefficients C with C G C^T = I, lower triangular (Gram-Schmidt order)."""
    L = np.linalg.cholesky(gram)
    C = np.linalg.inv(L)
    # one refinement pass to push orthonormality to machine precision
    G2 = C @ gram @ C.T
    C = np.linalg.inv(np.linalg.cholesky(G2)) @ C
    return C


@lru_cache(maxsize=None)
def _element_basis_coeffs(k: int) -> tuple[np.ndarray, np.ndarray]:
    exps = _tri_monomial_exponents(k)
    m = len(exps)
    gram = np.empty((m, m))
    for i, (a, b) in enumerate(exps):
        for j, (c, d) in enumerate(exps):
            gram[i, j] = 2.0 * _tri_monomial_integral(a + c, b + d)
    return _orthonormalize(gram), exps


@lru_cache(maxsize=None)
def _facet_basis_coeffs(k: int) -> np.ndarray:
    m = k + 1
    gram = np.array([[1.0 / (i + j + 1) for j in range(m)] for i in range(m)])
    return _orthonormalize(gram)


def element_basis(k: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and reference gradients of the orthonormal element basis.

    Returns ``values`` of shape (m_E, npts) and ``grads`` of shape
    (m_E, npts, 2), where m_E = (k+1)(k+2)/2.
    """
    if k < 1:
        raise ValueError("polynomial degree k must be >= 1")
    C, exps = _element_basis_coeffs(k)
    pts = np.atleast_2d(points)
    x, y = pts[:, 0], pts[:, 1]
    m = len(exps)
    mono = np.empty((m, len(pts)))
    dmono = np.zeros((m, len(pts), 2))
    for i, (a, b) in enumerate(exps):
        xa = x ** a
        yb = y ** b
        mono[i] = xa * yb
        if a > 0:
            dmono[i, :, 0] = a * x ** (a - 1) * yb
        if b > 0:
            dmono[i, :, 1] = b * xa * y ** (b - 1)
    return C @ mono, np.einsum("im,mpd->ipd", C, dmono)


def facet_basis(k: int, t: np.ndarray) -> np.ndarray:
    """Values of the orthonormal facet basis at parameters t in [0, 1]."""
    if k < 1:
        raise ValueError("polynomial degree k must be >= 1")
    C = _facet_basis_coeffs(k)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    mono = np.vander(t, k + 1, increasing=True).T
    return C @ mono


# ---------------------------------------------------------------------------
# DOF bookkeeping


@dataclass(frozen=True)
class DofMap:
    """Global ordering: all element blocks first, then all facet blocks."""

    k: int
    n_elements: int
    n_facets: int

    @property
    def elem_block(self) -> int:
        return (self.k + 1) * (self.k + 2) // 2

    @property
    def facet_block(self) -> int:
        return self.k + 1

    @property
    def n_elem_dofs(self) -> int:
        return self.n_elements * self.elem_block

    @property
    def n_facet_dofs(self) -> int:
        return self.n_facets * self.facet_block

    @property
    def n_dofs(self) -> int:
        return self.n_elem_dofs + self.n_facet_dofs

    def elem_slice(self, e: int) -> slice:
        return slice(e * self.elem_block, (e + 1) * self.elem_block)

    def facet_slice(self, f: int) -> slice:
        off = self.n_elem_dofs
        return slice(off + f * self.facet_block, off + (f + 1) * self.facet_block)


class PairField:
    """Coefficient vector over the element x facet product space."""

    __slots__ = ("dofmap", "coeffs")

    def __init__(self, dofmap: DofMap, coeffs: np.ndarray | None = None):
        self.dofmap = dofmap
        if coeffs is None:
            coeffs = np.zeros(dofmap.n_dofs)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (dofmap.n_dofs,):
            raise ValueError(
                f"coefficient vector has length {coeffs.shape}, "
                f"expected ({dofmap.n_dofs},)")
        self.coeffs = coeffs

    @property
    def elem_coeffs(self) -> np.ndarray:
        """(ne, m_E) view of the element blocks."""
        dm = self.dofmap
        return self.coeffs[:dm.n_elem_dofs].reshape(dm.n_elements, dm.elem_block)

    @property
    def facet_coeffs(self) -> np.ndarray:
        """(nf, m_F) view of the facet blocks."""
        dm = self.dofmap
        return self.coeffs[dm.n_elem_dofs:].reshape(dm.n_facets, dm.facet_block)

    def copy(self) -> "PairField":
        return PairField(self.dofmap, self.coeffs.copy())

    def __add__(self, other: "PairField") -> "PairField":
        return PairField(self.dofmap, self.coeffs + other.coeffs)

    def __sub__(self, other: "PairField") -> "PairField":
        return PairField(self.dofmap, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "PairField":
        return PairField(self.dofmap, self.coeffs * a)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# the assembled space


class FeSpace:
    """Mesh + degree + quadrature + precomputed basis/trace tables.

    All tables are immutable after construction; per-element kernels read
    from disjoint blocks, so concurrent evaluation over elements is safe.
    """

    def __init__(self, mesh: Mesh, k: int, quad: QuadratureRule | None = None):
        if k < 1:
            raise ValueError("polynomial degree k must be >= 1")
        self.mesh = mesh
        self.k = k
        self.quad = quad if quad is not None else QuadratureRule.for_degree(k)
        self.dofmap = DofMap(k, mesh.n_elements, mesh.n_facets)

        p = mesh.vertices[mesh.elements]  # (ne, 3, 2)
        self.v0 = p[:, 0]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.jac = jac                       # (ne, 2, 2), columns are edges
        self.jac_inv = np.linalg.inv(jac)
        self.jinvT = np.transpose(self.jac_inv, (0, 2, 1))
        self.sqrt_area = np.sqrt(mesh.areas)

        # reference basis at element quadrature points
        self.psi, self.dpsi = element_basis(k, self.quad.tri_points)
        # physical gradients: (ne, m_E, Q, 2), scaled by 1/sqrt|E|
        self.grad_phys = np.einsum(
            "eab,mqb->emqa", self.jinvT, self.dpsi) / self.sqrt_area[:, None, None, None]
        self.elem_qpts = self.map_to_physical(self.quad.tri_points)  # (ne, Q, 2)

        # facet tables: canonical parameterization from the lower to the
        # higher global vertex index, shared by both neighbors
        fa = mesh.vertices[mesh.facet_vertices[:, 0]]
        fb = mesh.vertices[mesh.facet_vertices[:, 1]]
        t = self.quad.seg_points
        self.facet_qpts = fa[:, None, :] + t[None, :, None] * (fb - fa)[:, None, :]
        self.facet_psi_ref = facet_basis(k, t)                     # (m_F, Qf)
        self.facet_psi = (self.facet_psi_ref[None, :, :]
                          / np.sqrt(mesh.facet_lengths)[:, None, None])

        # element-side traces at the facet quadrature points, per local facet
        ne, mE, qf = mesh.n_elements, self.dofmap.elem_block, len(t)
        self.trace_psi = np.empty((ne, 3, mE, qf))
        self.trace_dpsi_n = np.empty((ne, 3, mE, qf))
        self.elem_outward_normals = np.empty((ne, 3, 2))
        for loc in range(3):
            fid = mesh.elem_facets[:, loc]
            xq = self.facet_qpts[fid]                              # (ne, Qf, 2)
            xi = np.einsum("eab,eqb->eqa", self.jac_inv, xq - self.v0[:, None, :])
            vals, grads = element_basis(k, xi.reshape(-1, 2))
            vals = vals.reshape(mE, ne, qf).transpose(1, 0, 2)
            grads = grads.reshape(mE, ne, qf, 2).transpose(1, 0, 2, 3)
            gphys = np.einsum("eab,emqb->emqa", self.jinvT, grads)
            a_loc = mesh.elements[np.arange(ne), loc]
            b_loc = mesh.elements[np.arange(ne), (loc + 1) % 3]
            tvec = mesh.vertices[b_loc] - mesh.vertices[a_loc]
            nrm = np.column_stack([tvec[:, 1], -tvec[:, 0]])
            nrm /= np.linalg.norm(nrm, axis=1)[:, None]
            self.elem_outward_normals[:, loc] = nrm
            scale = self.sqrt_area[:, None, None]
            self.trace_psi[:, loc] = vals / scale
            self.trace_dpsi_n[:, loc] = np.einsum("emqa,ea->emq", gphys, nrm) / scale

    # -- basic geometry helpers ------------------------------------------

    def map_to_physical(self, ref_points: np.ndarray) -> np.ndarray:
        """Map reference points to all elements, shape (ne, npts, 2)."""
        return (self.v0[:, None, :]
                + np.einsum("eab,qb->eqa", self.jac, np.atleast_2d(ref_points)))

    def new_field(self, coeffs: np.ndarray | None = None) -> PairField:
        return PairField(self.dofmap, coeffs)

    @property
    def domain_area(self) -> float:
        return self.mesh.domain_area

    # -- field evaluation --------------------------------------------------

    def elem_values_at_quad(self, field: PairField) -> np.ndarray:
        """Element-part values at the element quadrature points, (ne, Q)."""
        return np.einsum("em,mq->eq", field.elem_coeffs, self.psi) \
            / self.sqrt_area[:, None]

    def elem_grads_at_quad(self, field: PairField) -> np.ndarray:
        """Element-part gradients at quadrature points, (ne, Q, 2)."""
        return np.einsum("em,emqa->eqa", field.elem_coeffs, self.grad_phys)

    def trace_values(self, field: PairField, loc: int) -> np.ndarray:
        """Element traces on local facet loc at facet quad points, (ne, Qf)."""
        return np.einsum("em,emq->eq", field.elem_coeffs, self.trace_psi[:, loc])

    def facet_values(self, field: PairField) -> np.ndarray:
        """Facet-part values at the facet quadrature points, (nf, Qf)."""
        return np.einsum("fm,fmq->fq", field.facet_coeffs, self.facet_psi)

    def integrate_elem(self, values: np.ndarray) -> float:
        """Integrate per-quad-point values (ne, Q) over the domain."""
        return float(np.einsum("eq,q,e->", values, self.quad.tri_weights,
                               self.mesh.areas))

    def evaluate(self, field: PairField, elems: np.ndarray,
                 points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Evaluate the element part at physical points inside given elements.

        Raises ValueError if any point lies outside its element (barycentric
        coordinates beyond [-tol, 1+tol]).
        """
        elems = np.atleast_1d(np.asarray(elems, dtype=np.int64))
        points = np.atleast_2d(points)
        xi = np.einsum("eab,eb->ea", self.jac_inv[elems], points - self.v0[elems])
        bary = np.column_stack([1.0 - xi.sum(axis=1), xi])
        if bary.min() < -tol or bary.max() > 1.0 + tol:
            bad = int(np.argmin(bary.min(axis=1)))
            raise ValueError(
                f"point {points[bad]} outside element {elems[bad]} "
                f"(barycentric {bary[bad]})")
        vals, _ = element_basis(self.k, xi)
        return np.einsum("em,me->e", field.elem_coeffs[elems], vals) \
            / self.sqrt_area[elems]

    def evaluate_gradient(self, field: PairField, elems: np.ndarray,
                          points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        elems = np.atleast_1d(np.asarray(elems, dtype=np.int64))
        points = np.atleast_2d(points)
        xi = np.einsum("eab,eb->ea", self.jac_inv[elems], points - self.v0[elems])
        bary = np.column_stack([1.0 - xi.sum(axis=1), xi])
        if bary.min() < -tol or bary.max() > 1.0 + tol:
            raise ValueError("point outside element")
        _, grads = element_basis(self.k, xi)
        gphys = np.einsum("eab,meb->mea", self.jinvT[elems], grads)
        return np.einsum("em,mea->ea", field.elem_coeffs[elems], gphys) \
            / self.sqrt_area[elems][:, None]

    # -- projections and means ----------------------------------------------

    def project_l2(self, f, subdivide: int = 0) -> PairField:
        """Componentwise L2 projection of a callable f(x, y) onto the pair space.

        ``subdivide`` red-refines the projection quadrature only (each level
        quadruples the element rule and doubles the facet rule); use it for
        discontinuous data. Raises on non-finite values of f at quadrature
        points.
        """
        tp, tw = self.quad.tri_points, self.quad.tri_weights
        sp, sw = self.quad.seg_points, self.quad.seg_weights
        if subdivide > 0:
            tp, tw = subdivide_triangle_rule(tp, tw, subdivide)
            sp, sw = subdivide_segment_rule(sp, sw, subdivide)
        psi, _ = element_basis(self.k, tp)
        xq = self.map_to_physical(tp)                            # (ne, Qs, 2)
        fv = np.asarray(f(xq[..., 0], xq[..., 1]), dtype=float)
        fv = np.broadcast_to(fv, xq.shape[:2])
        if not np.all(np.isfinite(fv)):
            raise ValueError("non-finite value of f at a quadrature point")
        out = self.new_field()
        out.elem_coeffs[:] = np.einsum(
            "eq,q,mq->em", fv, tw, psi) * self.sqrt_area[:, None]

        fpsi = facet_basis(self.k, sp)
        mesh = self.mesh
        fa = mesh.vertices[mesh.facet_vertices[:, 0]]
        fb = mesh.vertices[mesh.facet_vertices[:, 1]]
        xf = fa[:, None, :] + sp[None, :, None] * (fb - fa)[:, None, :]
        gv = np.asarray(f(xf[..., 0], xf[..., 1]), dtype=float)
        gv = np.broadcast_to(gv, xf.shape[:2])
        if not np.all(np.isfinite(gv)):
            raise ValueError("non-finite value of f at a facet quadrature point")
        out.facet_coeffs[:] = np.einsum(
            "fq,q,mq->fm", gv, sw, fpsi) * np.sqrt(mesh.facet_lengths)[:, None]
        return out

    def integral_vector(self) -> np.ndarray:
        """DOF vector m with m . x = integral of the element part over Omega."""
        m = np.zeros(self.dofmap.n_dofs)
        idx = np.arange(self.mesh.n_elements) * self.dofmap.elem_block
        m[idx] = self.sqrt_area
        return m

    def mean_value(self, field: PairField) -> float:
        """Mean of the element part over the domain (exact for polynomials)."""
        return float(self.integral_vector() @ field.coeffs) / self.domain_area

    def constant_field(self, value: float) -> PairField:
        """The pair (value, value): constant element and facet parts."""
        out = self.new_field()
        out.elem_coeffs[:, 0] = value * self.sqrt_area
        out.facet_coeffs[:, 0] = value * np.sqrt(self.mesh.facet_lengths)
        return out

    def remove_mean(self, field: PairField) -> PairField:
        """Shift the element part to zero mean (facet part untouched)."""
        out = field.copy()
        vbar = self.mean_value(field)
        out.elem_coeffs[:, 0] -= vbar * self.sqrt_area
        return out

    # -- sampling -----------------------------------------------------------

    def linf_lattice(self) -> np.ndarray:
        """Reference sampling lattice of degree k+3 (includes the vertices)."""
        p = self.k + 3
        pts = [(i / p, j / p) for i in range(p + 1) for j in range(p + 1 - i)]
        return np.asarray(pts)

    def linf_norm(self, field: PairField) -> float:
        """Max |element part| over the degree-(k+3) lattice in every element."""
        pts = self.linf_lattice()
        vals, _ = element_basis(self.k, pts)
        sampled = np.einsum("em,mq->eq", field.elem_coeffs, vals) \
            / self.sqrt_area[:, None]
        return float(np.abs(sampled).max())

    def grad_lp_norm(self, field: PairField, p: float) -> float:
        """L^p norm of the broken gradient of the element part (quadrature)."""
        g = self.elem_grads_at_quad(field)
        mag = np.sqrt((g ** 2).sum(axis=2))
        return float(self.integrate_elem(mag ** p) ** (1.0 / p))

    def l2_norm_elem(self, field: PairField) -> float:
        """L2 norm of the element part (exact, orthonormal basis)."""
        return float(np.linalg.norm(field.elem_coeffs))
