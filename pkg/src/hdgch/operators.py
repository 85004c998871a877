"""Constrained solves on the zero-mean subspace.

The zero-mean constraint is imposed through a single Lagrange multiplier on
the element-mean functional, which keeps the saddle matrix symmetric and the
constraint exact. Factorizations are cached and immutable, so concurrent
solves against one factorization are safe.

Also provides truncated Neumann cosine-series references on the unit square
used by the probe suite (manufactured continuous solutions and dual norms).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import NormSuite, assemble_aD, default_sigma
from .space import FeSpace, PairField, element_basis, subdivide_triangle_rule

__all__ = [
    "SolverError",
    "ConstrainedSolver",
    "DiscreteOperators",
    "SeriesGrid",
]


class SolverError(RuntimeError):
    """A constrained solve failed or left a large residual."""


class ConstrainedSolver:
    """Direct factorization of the saddle system [[A, m], [m^T, 0]].

    Solutions satisfy the variational problem tested against the subspace
    annihilated by the constraint vector m, plus ``m . x = constraint``.
    """

    residual_rtol = 1e-11
    constraint_rtol = 1e-12

    def __init__(self, op: sp.spmatrix, constraint: np.ndarray):
        n = op.shape[0]
        self.n = n
        m = sp.csc_matrix(constraint.reshape(n, 1))
        self.system = sp.bmat([[op, m], [m.T, None]], format="csc")
        try:
            self.lu = spla.splu(self.system)
        except RuntimeError as exc:
            raise SolverError(
                f"singular saddle system (broken constraint vector?): {exc}"
            ) from exc
        self.n_solves = 0

    def solve(self, rhs: np.ndarray, constraint_value: float = 0.0) -> np.ndarray:
        b = np.append(rhs, constraint_value)
        x = self.lu.solve(b)
        resid = b - self.system @ x
        tol = self.residual_rtol * max(np.linalg.norm(b), 1e-300)
        if np.linalg.norm(resid) > tol:
            x = x + self.lu.solve(resid)  # one refinement pass
            resid = b - self.system @ x
            if np.linalg.norm(resid) > tol:
                raise SolverError(
                    f"saddle solve residual {np.linalg.norm(resid):.3e} "
                    f"exceeds {tol:.3e}")
        self.n_solves += 1
        return x[:self.n]


class DiscreteOperators:
    """Discrete Laplacian, Green operator, source-lift operator, and the
    penalized-form elliptic projection, all sharing one pair of cached
    saddle factorizations."""

    def __init__(self, space: FeSpace, sigma: float | None = None,
                 suite: NormSuite | None = None, aD: sp.csr_matrix | None = None):
        self.space = space
        self.sigma = default_sigma(space.k) if sigma is None else sigma
        self.suite = suite if suite is not None else NormSuite(space)
        self.aD = aD if aD is not None else assemble_aD(space, self.sigma)
        self.int_vec = space.integral_vector()
        self._solver_aD = ConstrainedSolver(self.aD, self.int_vec)
        self._solver_gram0h = ConstrainedSolver(self.suite.gram_0h, self.int_vec)

    # -- core operators ------------------------------------------------------

    def discrete_laplacian(self, w: PairField) -> PairField:
        """z with -(z, v)_0h = aD(w, v) for all zero-mean test pairs."""
        rhs = -(self.aD @ w.coeffs)
        return self.space.new_field(self._solver_gram0h.solve(rhs))

    def discrete_green(self, w: PairField) -> PairField:
        """z with aD(z, v) = (w, v)_0h for all zero-mean test pairs."""
        rhs = self.suite.gram_0h @ w.coeffs
        return self.space.new_field(self._solver_aD.solve(rhs))

    def j_operator(self, w: PairField, mean_tol: float = 1e-10) -> PairField:
        """z with aD(z, v) = (w, v)_Omega; requires zero-mean element part.

        Only the element part of w enters the right-hand side.
        """
        wbar = self.space.mean_value(w)
        if abs(wbar) > mean_tol:
            raise ValueError(f"element part has nonzero mean {wbar:.3e}")
        rhs = self.suite.mass @ w.coeffs
        return self.space.new_field(self._solver_aD.solve(rhs))

    # -- projections -----------------------------------------------------------

    def _aD_pair_rhs(self, grad_f) -> np.ndarray:
        """Right side aD((f, f|_Gamma), .) for a function with gradient grad_f.

        Only the gradient enters: the element-to-trace differences of the
        exact pair vanish, killing the penalty and one consistency term.
        """
        space = self.space
        mesh = space.mesh
        dm = space.dofmap
        rhs = np.zeros(dm.n_dofs)

        xq = space.elem_qpts
        g = np.asarray(grad_f(xq[..., 0], xq[..., 1]), dtype=float)  # (ne,Q,2)
        vol = np.einsum("eqa,emqa,q->em", g, space.grad_phys,
                        space.quad.tri_weights, optimize=True) \
            * mesh.areas[:, None]
        rhs[:dm.n_elem_dofs] = vol.ravel()

        ws = space.quad.seg_weights
        elem_rows = rhs[:dm.n_elem_dofs].reshape(mesh.n_elements, dm.elem_block)
        facet_rows = rhs[dm.n_elem_dofs:].reshape(mesh.n_facets, dm.facet_block)
        for loc in range(3):
            fid = mesh.elem_facets[:, loc]
            xf = space.facet_qpts[fid]
            gf = np.asarray(grad_f(xf[..., 0], xf[..., 1]), dtype=float)
            gn = np.einsum("eqa,ea->eq", gf, space.elem_outward_normals[:, loc])
            wq = ws[None, :] * mesh.facet_lengths[fid][:, None]
            elem_rows -= np.einsum("eq,eq,emq->em", gn, wq,
                                   space.trace_psi[:, loc], optimize=True)
            contrib = np.einsum("eq,eq,emq->em", gn, wq,
                                space.facet_psi[fid], optimize=True)
            np.add.at(facet_rows, fid, contrib)
        return rhs

    def elliptic_projection(self, f, grad_f, subdivide: int = 0) -> PairField:
        """Projection through the penalized Laplace form, mean-matched to f."""
        rhs = self._aD_pair_rhs(grad_f)
        integral = self._integral_of(f, subdivide)
        return self.space.new_field(self._solver_aD.solve(rhs, integral))

    def initial_projection(self, f, mode: str = "elliptic", grad_f=None,
                           subdivide: int = 0) -> PairField:
        """Initial-state projection: variational ('elliptic') or plain L2."""
        if mode == "l2":
            return self.space.project_l2(f, subdivide=subdivide)
        if mode == "elliptic":
            if grad_f is None:
                raise ValueError(
                    "elliptic initial projection requires the gradient of c0")
            return self.elliptic_projection(f, grad_f, subdivide=subdivide)
        raise ValueError(f"unknown initial projection mode {mode!r}")

    def _integral_of(self, f, subdivide: int = 0) -> float:
        space = self.space
        tp, tw = space.quad.tri_points, space.quad.tri_weights
        if subdivide > 0:
            tp, tw = subdivide_triangle_rule(tp, tw, subdivide)
        xq = space.map_to_physical(tp)
        fv = np.broadcast_to(np.asarray(f(xq[..., 0], xq[..., 1]), dtype=float),
                             xq.shape[:2])
        return float(np.einsum("eq,q,e->", fv, tw, space.mesh.areas))


# ---------------------------------------------------------------------------
# Neumann cosine-series references on the unit square


class SeriesGrid:
    """Truncated cos(m pi x) cos(n pi y) transforms for broken fields.

    Quadrature elements are red-refined until the highest mode is resolved,
    so coefficients of piecewise polynomials are accurate to ~1e-10. The
    reported ``tail`` of a transform bounds the L2 mass beyond the cutoff.
    """

    def __init__(self, space: FeSpace, modes: int = 64):
        if not space.mesh.structured_n:
            raise ValueError("series references require the unit-square mesh")
        self.space = space
        self.modes = modes
        h = space.mesh.h
        target = 3.0 / (np.pi * max(modes, 1))
        self.levels = max(0, int(np.ceil(np.log2(max(h / target, 1.0)))))
        tp, tw = subdivide_triangle_rule(space.quad.tri_points,
                                         space.quad.tri_weights, self.levels)
        self.tp, self.tw = tp, tw
        self.psi, _ = element_basis(space.k, tp)
        xq = space.map_to_physical(tp)
        self.x = xq[..., 0].ravel()
        self.y = xq[..., 1].ravel()
        self.w = (space.mesh.areas[:, None] * tw[None, :]).ravel()
        mn = np.arange(modes + 1)
        normsq = np.full((modes + 1, modes + 1), 0.25)
        normsq[0, :] = 0.5
        normsq[:, 0] = 0.5
        normsq[0, 0] = 1.0
        self.normsq = normsq
        self.lam = np.pi ** 2 * (mn[:, None] ** 2 + mn[None, :] ** 2)

    def elem_values(self, field: PairField) -> np.ndarray:
        vals = np.einsum("em,mq->eq", field.elem_coeffs, self.psi) \
            / self.space.sqrt_area[:, None]
        return vals.ravel()

    def transform(self, values: np.ndarray, chunk: int = 200_000):
        """Series coefficients of point values on the grid.

        Returns (coeffs, tail_l2sq): coeffs[m, n] such that the field is
        approximately sum coeffs[m,n] cos(m pi x) cos(n pi y); tail_l2sq is
        the L2 mass not captured by the truncation (nonnegative up to
        quadrature error).
        """
        mpts = len(self.x)
        M = self.modes + 1
        mn = np.arange(M)
        acc = np.zeros((M, M))
        l2sq = 0.0
        for s in range(0, mpts, chunk):
            sl = slice(s, min(s + chunk, mpts))
            cx = np.cos(np.outer(mn, np.pi * self.x[sl]))
            cy = np.cos(np.outer(mn, np.pi * self.y[sl]))
            gv = values[sl] * self.w[sl]
            acc += (cx * gv[None, :]) @ cy.T
            l2sq += float(values[sl] @ gv)
        coeffs = acc / self.normsq
        captured = float((coeffs ** 2 * self.normsq).sum())
        return coeffs, max(l2sq - captured, 0.0)

    def eval_series(self, coeffs: np.ndarray, x: np.ndarray, y: np.ndarray
                    ) -> np.ndarray:
        mn = np.arange(self.modes + 1)
        shape = np.broadcast(x, y).shape
        xf = np.ravel(np.broadcast_to(x, shape))
        yf = np.ravel(np.broadcast_to(y, shape))
        out = np.empty(len(xf))
        for s in range(0, len(xf), 200_000):
            sl = slice(s, min(s + 200_000, len(xf)))
            cx = np.cos(np.outer(np.pi * xf[sl], mn))
            cy = np.cos(np.outer(np.pi * yf[sl], mn))
            out[sl] = np.einsum("pm,mn,pn->p", cx, coeffs, cy, optimize=True)
        return out.reshape(shape)

    def vprime_norm(self, field: PairField) -> tuple[float, float]:
        """Dual norm of the element part against mean-one H1 test functions.

        Returns (norm, truncation_bound): the tail contributes at most
        ``tail_l2sq / (1 + pi^2 modes^2)`` to the squared norm.
        """
        coeffs, tail = self.transform(self.elem_values(field))
        weights = self.normsq / (1.0 + self.lam)
        weights[0, 0] = 0.0
        normsq = float((coeffs ** 2 * weights).sum())
        trunc = tail / (1.0 + np.pi ** 2 * self.modes ** 2)
        return np.sqrt(normsq), np.sqrt(trunc)

    def green_reference(self, field: PairField) -> tuple[PairField, float]:
        """Pair projection of the continuous Neumann solve of the element part.

        The element part must have (numerically) zero mean. Returns the
        projected reference and the L2 truncation mass of the input series.
        """
        coeffs, tail = self.transform(self.elem_values(field))
        g = np.zeros_like(coeffs)
        mask = self.lam > 0
        g[mask] = coeffs[mask] / self.lam[mask]
        func = lambda x, y: self.eval_series(g, x, y)
        ref = self.space.project_l2(func, subdivide=self.levels)
        return ref, tail
