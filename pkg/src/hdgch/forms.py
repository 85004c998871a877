"""Assembly of the HDG bilinear forms and the mesh-dependent norms.

The interior-penalty form discretizing -Laplace couples element unknowns to
their own element and to the facets of that element only. Local kernels are
symmetrized exactly and accumulated into triplets in a fixed element order,
so assembled matrices are bit-reproducible and exactly symmetric.
"""

from __future__ import annotations

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from .space import FeSpace, PairField

__all__ = [
    "default_sigma",
    "aD_local_kernels",
    "assemble_aD",
    "assemble_mass",
    "assemble_j",
    "assemble_broken_stiffness",
    "assemble_normal_trace",
    "assemble_dg_jump",
    "NormSuite",
    "coercivity_estimate",
    "write_matrix_market",
]


def default_sigma(k: int) -> float:
    """Default interior-penalty parameter, 8 k^2.

    The diameter-weighted penalty needs sigma above the normal-trace
    constant of the element family; on the structured right-triangle family
    the measured coercivity threshold is about 7 k^2, so 4 k^2 is rejected
    by the startup Rayleigh probe and 8 k^2 is the smallest power-of-two
    multiple that is uniformly coercive (see coercivity_estimate).
    """
    return 8.0 * k * k


def _local_dof_ids(space: FeSpace) -> np.ndarray:
    """Global dof ids for the local layout [element block | 3 facet blocks]."""
    dm = space.dofmap
    ne, mE, mF = dm.n_elements, dm.elem_block, dm.facet_block
    g = np.empty((ne, mE + 3 * mF), dtype=np.int64)
    g[:, :mE] = (np.arange(ne) * mE)[:, None] + np.arange(mE)[None, :]
    base = dm.n_elem_dofs
    for loc in range(3):
        fid = space.mesh.elem_facets[:, loc]
        g[:, mE + loc * mF: mE + (loc + 1) * mF] = \
            base + fid[:, None] * mF + np.arange(mF)[None, :]
    return g


def _symmetrize(kern: np.ndarray) -> np.ndarray:
    return 0.5 * (kern + np.transpose(kern, (0, 2, 1)))


def _scatter(space: FeSpace, kernels: np.ndarray, gdofs: np.ndarray,
             shape: tuple[int, int] | None = None) -> sp.csr_matrix:
    n = space.dofmap.n_dofs
    rows = np.broadcast_to(gdofs[:, :, None], kernels.shape).ravel()
    cols = np.broadcast_to(gdofs[:, None, :], kernels.shape).ravel()
    mat = sp.coo_matrix((kernels.ravel(), (rows, cols)),
                        shape=shape or (n, n))
    return mat.tocsr()


def aD_local_kernels(space: FeSpace, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-element dense kernels of the penalized Laplace form.

    Returns (kernels, gdofs) with kernels of shape (ne, m, m) over the local
    layout [element dofs | facet dofs of the 3 local facets] and the matching
    global dof ids. Kernels are exactly symmetric.
    """
    if sigma <= 0:
        raise ValueError("penalty parameter sigma must be positive")
    mesh = space.mesh
    dm = space.dofmap
    ne, mE, mF = dm.n_elements, dm.elem_block, dm.facet_block
    m = mE + 3 * mF
    w = space.quad.tri_weights
    kern = np.zeros((ne, m, m))

    # volume: grad-grad; area factors cancel against the 1/sqrt|E| scaling
    kern[:, :mE, :mE] = np.einsum(
        "emqa,q,enqa->emn", space.grad_phys, w, space.grad_phys,
        optimize=True) * mesh.areas[:, None, None]

    ws = space.quad.seg_weights
    for loc in range(3):
        fid = mesh.elem_facets[:, loc]
        he = mesh.facet_lengths[fid]
        T = space.trace_psi[:, loc]                    # (ne, mE, Qf)
        Nn = space.trace_dpsi_n[:, loc]
        F = space.facet_psi[fid]                       # (ne, mF, Qf)
        D = np.concatenate([T, -F], axis=1)            # (u - uhat) rows
        Npad = np.concatenate([Nn, np.zeros_like(F)], axis=1)
        wq = ws[None, :] * he[:, None]
        P = np.einsum("eiq,eq,ejq->eij", Npad, wq, D, optimize=True)
        pen = np.einsum("eiq,eq,ejq->eij", D, wq, D, optimize=True) \
            * (sigma / mesh.diameters)[:, None, None]
        block = -(P + np.transpose(P, (0, 2, 1))) + pen
        idx = np.concatenate(
            [np.arange(mE), mE + loc * mF + np.arange(mF)])
        kern[np.ix_(np.arange(ne), idx, idx)] += block

    return _symmetrize(kern), _local_dof_ids(space)


def assemble_aD(space: FeSpace, sigma: float) -> sp.csr_matrix:
    """Assemble the penalized Laplace form over pair-field dofs."""
    kern, gdofs = aD_local_kernels(space, sigma)
    return _scatter(space, kern, gdofs)


def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    """Element L2 mass over pair dofs (facet rows and columns are zero)."""
    dm = space.dofmap
    ne, mE = dm.n_elements, dm.elem_block
    w = space.quad.tri_weights
    kern = np.einsum("mq,q,nq->mn", space.psi, w, space.psi)
    kern = 0.5 * (kern + kern.T)
    kernels = np.broadcast_to(kern, (ne, mE, mE))
    g = (np.arange(ne) * mE)[:, None] + np.arange(mE)[None, :]
    return _scatter(space, np.ascontiguousarray(kernels), g)


def assemble_j(space: FeSpace, weight: str) -> sp.csr_matrix:
    """Stabilization forms: weight "h" gives j0 (h_E), "1/h" gives j1 (1/h_E)."""
    if weight not in ("h", "1/h"):
        raise ValueError("weight must be 'h' or '1/h'")
    mesh = space.mesh
    dm = space.dofmap
    ne, mE, mF = dm.n_elements, dm.elem_block, dm.facet_block
    m = mE + 3 * mF
    ws = space.quad.seg_weights
    kern = np.zeros((ne, m, m))
    for loc in range(3):
        fid = mesh.elem_facets[:, loc]
        he = mesh.facet_lengths[fid]
        D = np.concatenate([space.trace_psi[:, loc], -space.facet_psi[fid]], axis=1)
        wE = mesh.diameters if weight == "h" else 1.0 / mesh.diameters
        wq = ws[None, :] * (he * wE)[:, None]
        block = np.einsum("eiq,eq,ejq->eij", D, wq, D, optimize=True)
        idx = np.concatenate([np.arange(mE), mE + loc * mF + np.arange(mF)])
        kern[np.ix_(np.arange(ne), idx, idx)] += block
    return _scatter(space, _symmetrize(kern), _local_dof_ids(space))


def assemble_broken_stiffness(space: FeSpace) -> sp.csr_matrix:
    """Sum of element grad-grad blocks over pair dofs."""
    dm = space.dofmap
    ne, mE = dm.n_elements, dm.elem_block
    w = space.quad.tri_weights
    kern = np.einsum("emqa,q,enqa->emn", space.grad_phys, w, space.grad_phys,
                     optimize=True) * space.mesh.areas[:, None, None]
    g = (np.arange(ne) * mE)[:, None] + np.arange(mE)[None, :]
    return _scatter(space, _symmetrize(kern), g)


def assemble_normal_trace(space: FeSpace) -> sp.csr_matrix:
    """The operator of sum_E h_E ||grad v . n||^2 over the element boundary."""
    mesh = space.mesh
    dm = space.dofmap
    ne, mE = dm.n_elements, dm.elem_block
    ws = space.quad.seg_weights
    kern = np.zeros((ne, mE, mE))
    for loc in range(3):
        he = mesh.facet_lengths[mesh.elem_facets[:, loc]]
        Nn = space.trace_dpsi_n[:, loc]
        wq = ws[None, :] * (he * mesh.diameters)[:, None]
        kern += np.einsum("eiq,eq,ejq->eij", Nn, wq, Nn, optimize=True)
    g = (np.arange(ne) * mE)[:, None] + np.arange(mE)[None, :]
    return _scatter(space, _symmetrize(kern), g)


def assemble_dg_jump(space: FeSpace) -> sp.csr_matrix:
    """Interior-facet jump operator sum_e (1/h_e) ||[v]||^2 (element dofs)."""
    mesh = space.mesh
    dm = space.dofmap
    mE = dm.elem_block
    interior = np.where(~mesh.boundary_mask)[0]
    if len(interior) == 0:
        return sp.csr_matrix((dm.n_dofs, dm.n_dofs))
    ep = mesh.facet_elems[interior, 0]
    em = mesh.facet_elems[interior, 1]
    lp = mesh.facet_local[interior, 0]
    lm = mesh.facet_local[interior, 1]
    Tp = space.trace_psi[ep, lp]
    Tm = space.trace_psi[em, lm]
    J = np.concatenate([Tp, -Tm], axis=1)
    ws = space.quad.seg_weights
    # (1/h_e) * h_e from the facet measure cancels
    kern = np.einsum("fiq,q,fjq->fij", J, ws, J, optimize=True)
    g = np.concatenate([(ep * mE)[:, None] + np.arange(mE)[None, :],
                        (em * mE)[:, None] + np.arange(mE)[None, :]], axis=1)
    return _scatter(space, _symmetrize(kern), g)


class NormSuite:
    """Cached operators for the mesh-dependent norms and inner products."""

    def __init__(self, space: FeSpace):
        self.space = space
        self.mass = assemble_mass(space)
        self.j0 = assemble_j(space, "h")
        self.j1 = assemble_j(space, "1/h")
        self.stiffness = assemble_broken_stiffness(space)
        self.normal_trace = assemble_normal_trace(space)
        self.dg_jump = assemble_dg_jump(space)
        self.gram_0h = (self.mass + self.j0).tocsr()
        self.gram_1h = (self.stiffness + self.j1).tocsr()

    def _quad(self, op: sp.csr_matrix, v: PairField) -> float:
        return float(v.coeffs @ (op @ v.coeffs))

    def inner_0h(self, u: PairField, v: PairField) -> float:
        """(u, v)_Omega + j0(u, v)."""
        return float(u.coeffs @ (self.gram_0h @ v.coeffs))

    def inner_1h(self, u: PairField, v: PairField) -> float:
        return float(u.coeffs @ (self.gram_1h @ v.coeffs))

    def j0_value(self, u: PairField, v: PairField) -> float:
        return float(u.coeffs @ (self.j0 @ v.coeffs))

    def j1_value(self, u: PairField, v: PairField) -> float:
        return float(u.coeffs @ (self.j1 @ v.coeffs))

    def norm_0h(self, v: PairField) -> float:
        return np.sqrt(max(self._quad(self.gram_0h, v), 0.0))

    def norm_1h(self, v: PairField) -> float:
        return np.sqrt(max(self._quad(self.gram_1h, v), 0.0))

    def norm_1h_star(self, v: PairField) -> float:
        q = self._quad(self.gram_1h, v) + self._quad(self.normal_trace, v)
        return np.sqrt(max(q, 0.0))

    def norm_dg(self, v: PairField) -> float:
        """DG semi-norm of the element part (interior-facet jumps only)."""
        q = self._quad(self.stiffness, v) + self._quad(self.dg_jump, v)
        return np.sqrt(max(q, 0.0))

    def norm_l2(self, v: PairField) -> float:
        return np.sqrt(max(self._quad(self.mass, v), 0.0))


def coercivity_estimate(space: FeSpace, sigma: float,
                        aD: sp.csr_matrix | None = None) -> float:
    """Smallest Rayleigh quotient of the penalized form over the 1,h norm.

    Computed densely on the subspace orthogonal to the constant pair, so
    intended for small probe meshes only.
    """
    A = (aD if aD is not None else assemble_aD(space, sigma)).toarray()
    suite = NormSuite(space)
    B = suite.gram_1h.toarray()
    e = space.constant_field(1.0).coeffs
    # orthonormal basis of the complement of the constant pair
    Z = scipy.linalg.null_space(e.reshape(1, -1))
    Az = Z.T @ A @ Z
    Bz = Z.T @ B @ Z
    vals = scipy.linalg.eigh(0.5 * (Az + Az.T), 0.5 * (Bz + Bz.T),
                             eigvals_only=True)
    return float(vals.min())


def write_matrix_market(op: sp.spmatrix, path) -> None:
    """Dump an assembled operator in MatrixMarket coordinate format."""
    scipy.io.mmwrite(path, sp.coo_matrix(op))
