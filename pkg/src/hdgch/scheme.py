"""Fully discrete Cahn-Hilliard stepper.

Implicit Euler in time with convex-concave splitting of the chemical energy
density: the convex part is taken at the new state, the concave part at the
previous one, which makes every step unconditionally energy stable. Each
step solves the coupled nonlinear system for (c, mu) with damped Newton;
the linearized two-field system is reduced per element onto the facet
unknowns (static condensation) and the facet Schur complement is factorized
directly. A monolithic sparse path is kept for verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dfield
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import NormSuite, aD_local_kernels, default_sigma
from .mesh import build_structured_mesh
from .operators import ConstrainedSolver
from .space import FeSpace, PairField

__all__ = [
    "Potential",
    "SchemeState",
    "NewtonReport",
    "StepFailure",
    "CahnHilliardScheme",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"HDGCH1"


class StepFailure(RuntimeError):
    """Newton did not converge; carries the iteration diagnostics."""

    def __init__(self, message: str, report: "NewtonReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Potential:
    """Chemical energy density split into convex plus concave parts."""

    phi: Callable
    phi_plus: Callable
    phi_minus: Callable
    dphi_plus: Callable
    dphi_minus: Callable
    d2phi_plus: Callable
    name: str = "custom"

    @classmethod
    def ginzburg_landau(cls) -> "Potential":
        """Double-well density (1+c)^2 (1-c)^2 / 4 with splitting
        (1 + c^4)/4 + (-c^2/2)."""
        return cls(
            phi=lambda c: 0.25 * (1.0 + c) ** 2 * (1.0 - c) ** 2,
            phi_plus=lambda c: 0.25 * (1.0 + c ** 4),
            phi_minus=lambda c: -0.5 * c ** 2,
            dphi_plus=lambda c: c ** 3,
            dphi_minus=lambda c: -c,
            d2phi_plus=lambda c: 3.0 * c ** 2,
            name="ginzburg-landau",
        )


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    initial_residual: float
    final_residual: float
    halvings: int = 0


@dataclass
class SchemeState:
    """Time index, current fields, and the per-step ledgers."""

    n: int
    t: float
    tau: float
    kappa: float
    c: PairField
    mu: PairField
    mass: list = dfield(default_factory=list)
    energy: list = dfield(default_factory=list)
    linf: list = dfield(default_factory=list)
    mu_l2: list = dfield(default_factory=list)
    newton_iters: list = dfield(default_factory=list)
    times: list = dfield(default_factory=list)


class CahnHilliardScheme:
    """Stepper for the mixed system on one space.

    State is owned exclusively by the time loop; diagnostics receive
    immutable snapshots. All per-element work is batched.
    """

    max_newton = 50
    max_halvings = 8
    newton_rtol = 1e-10

    def __init__(self, space: FeSpace, kappa: float, tau: float,
                 sigma: float | None = None,
                 potential: Potential | None = None,
                 suite: NormSuite | None = None):
        if tau <= 0 or kappa <= 0:
            raise ValueError("tau and kappa must be positive")
        self.space = space
        self.kappa = float(kappa)
        self.tau = float(tau)
        self.sigma = default_sigma(space.k) if sigma is None else float(sigma)
        self.potential = potential or Potential.ginzburg_landau()
        self.suite = suite if suite is not None else NormSuite(space)

        dm = space.dofmap
        self.mE = dm.elem_block
        self.mF = dm.facet_block
        self.ne = dm.n_elements
        self.nf = dm.n_facets
        self.n_pair = dm.n_dofs
        self.int_vec = space.integral_vector()

        kern, gdofs = aD_local_kernels(space, self.sigma)
        mE, mF = self.mE, self.mF
        self.A_ee = np.ascontiguousarray(kern[:, :mE, :mE])
        self.A_ef = np.ascontiguousarray(kern[:, :mE, mE:])
        self.A_ff = np.ascontiguousarray(kern[:, mE:, mE:])
        rows = np.broadcast_to(gdofs[:, :, None], kern.shape).ravel()
        cols = np.broadcast_to(gdofs[:, None, :], kern.shape).ravel()
        self.aD = sp.coo_matrix((kern.ravel(), (rows, cols)),
                                shape=(self.n_pair, self.n_pair)).tocsr()
        self.mass_mat = self.suite.mass

        w = space.quad.tri_weights
        Me = np.einsum("mq,q,nq->mn", space.psi, w, space.psi)
        self.M_e = 0.5 * (Me + Me.T)

        # global facet-dof layout: per facet [c-hat block | mu-hat block]
        fidx = space.mesh.elem_facets  # (ne, 3)
        g = np.empty((self.ne, 6 * mF), dtype=np.int64)
        for loc in range(3):
            base = 2 * mF * fidx[:, loc]
            g[:, 2 * mF * loc: 2 * mF * loc + 2 * mF] = \
                base[:, None] + np.arange(2 * mF)[None, :]
        self.facet_gdofs = g
        self.n_facet_sys = 2 * mF * self.nf
        shp = (self.ne, 6 * mF, 6 * mF)
        self._srows = np.broadcast_to(g[:, :, None], shp).ravel()
        self._scols = np.broadcast_to(g[:, None, :], shp).ravel()

        self._mu0_solver = None
        self._lift_solver = None

    # -- pointwise nonlinearity ----------------------------------------------

    def _quad_vals(self, f: PairField) -> np.ndarray:
        return self.space.elem_values_at_quad(f)

    def _galerkin_vec(self, point_vals: np.ndarray) -> np.ndarray:
        """DOF vector of (g, test) over element rows for point values g."""
        space = self.space
        out = np.zeros(self.n_pair)
        out[:self.ne * self.mE] = (
            np.einsum("eq,q,mq->em", point_vals, space.quad.tri_weights,
                      space.psi) * space.sqrt_area[:, None]).ravel()
        return out

    def nonlinear_blocks(self, c: PairField) -> np.ndarray:
        """Per-element mass blocks weighted by the convex-part curvature."""
        space = self.space
        vals = self._quad_vals(c)
        wd2 = self.potential.d2phi_plus(vals) * space.quad.tri_weights[None, :]
        tmp = wd2[:, None, :] * space.psi[None, :, :]
        return tmp @ space.psi.T

    def residual(self, c: PairField, mu: PairField,
                 c_prev: PairField) -> tuple[np.ndarray, np.ndarray]:
        """Residual vectors of the two coupled equations over all test dofs."""
        A, M = self.aD, self.mass_mat
        r_a = M @ ((c.coeffs - c_prev.coeffs) / self.tau) + A @ mu.coeffs
        r_b = (self._galerkin_vec(self.potential.dphi_plus(self._quad_vals(c)))
               + self._galerkin_vec(self.potential.dphi_minus(self._quad_vals(c_prev)))
               + self.kappa * (A @ c.coeffs) - M @ mu.coeffs)
        return r_a, r_b

    def residual_norm(self, c, mu, c_prev) -> float:
        r_a, r_b = self.residual(c, mu, c_prev)
        return float(np.hypot(np.linalg.norm(r_a), np.linalg.norm(r_b)))

    # -- linear solves ---------------------------------------------------------

    def _element_blocks(self, c: PairField):
        """Jacobian blocks in the local two-field layout.

        Element rows/cols: [dc_E | dmu_E]; facet layout per local facet:
        [dc-hat | dmu-hat], matching the global per-facet interleave.
        """
        mE, mF, ne = self.mE, self.mF, self.ne
        Np = self.nonlinear_blocks(c)
        kap = self.kappa
        Kee = np.empty((ne, 2 * mE, 2 * mE))
        Kee[:, :mE, :mE] = self.M_e / self.tau
        Kee[:, :mE, mE:] = self.A_ee
        Kee[:, mE:, :mE] = kap * self.A_ee + Np
        Kee[:, mE:, mE:] = -self.M_e

        Kef = np.zeros((ne, 2 * mE, 6 * mF))
        Kfe = np.zeros((ne, 6 * mF, 2 * mE))
        Kff = np.zeros((ne, 6 * mF, 6 * mF))
        for loc in range(3):
            cs = slice(2 * mF * loc, 2 * mF * loc + mF)          # c-hat cols / a-eq rows
            ms = slice(2 * mF * loc + mF, 2 * mF * (loc + 1))    # mu-hat cols / b-eq rows
            Aef = self.A_ef[:, :, loc * mF:(loc + 1) * mF]
            Kef[:, :mE, ms] = Aef
            Kef[:, mE:, cs] = kap * Aef
            AefT = np.transpose(Aef, (0, 2, 1))
            Kfe[:, cs, mE:] = AefT
            Kfe[:, ms, :mE] = kap * AefT
            for lc in range(3):
                cs2 = slice(2 * mF * lc, 2 * mF * lc + mF)
                ms2 = slice(2 * mF * lc + mF, 2 * mF * (lc + 1))
                Aff = self.A_ff[:, loc * mF:(loc + 1) * mF, lc * mF:(lc + 1) * mF]
                Kff[:, cs, ms2] = Aff
                Kff[:, ms, cs2] = kap * Aff
        return Kee, Kef, Kfe, Kff

    def _reorganize_rhs(self, r_a: np.ndarray, r_b: np.ndarray):
        mE, mF = self.mE, self.mF
        nE = self.ne * mE
        be = np.concatenate([
            -r_a[:nE].reshape(self.ne, mE), -r_b[:nE].reshape(self.ne, mE)],
            axis=1)
        bf = np.concatenate([
            -r_a[nE:].reshape(self.nf, mF), -r_b[nE:].reshape(self.nf, mF)],
            axis=1)
        return be, bf

    def solve_linear_condensed(self, c: PairField, r_a: np.ndarray,
                               r_b: np.ndarray):
        """Facet Schur solve of the Newton system, then back-substitution."""
        mE, mF = self.mE, self.mF
        Kee, Kef, Kfe, Kff = self._element_blocks(c)
        try:
            Kee_inv = np.linalg.inv(Kee)
        except np.linalg.LinAlgError as exc:
            conds = np.linalg.cond(Kee)
            bad = int(np.argmax(conds))
            raise StepFailure(
                f"singular element block in element {bad} "
                f"(cond {conds[bad]:.3e})",
                NewtonReport(False, 0, np.nan, np.nan)) from exc

        be, bf = self._reorganize_rhs(r_a, r_b)
        X = Kee_inv @ Kef
        Sloc = Kff - Kfe @ X
        S = sp.coo_matrix((Sloc.ravel(), (self._srows, self._scols)),
                          shape=(self.n_facet_sys, self.n_facet_sys)).tocsc()
        ge = np.einsum("eij,ej->ei", Kee_inv, be)
        # facet rhs: per-facet blocks are contiguous in the global layout
        b_s = bf.ravel().copy()
        np.subtract.at(b_s, self.facet_gdofs.ravel(),
                       np.einsum("eij,ej->ei", Kfe, ge).ravel())
        xf = spla.splu(S).solve(b_s)
        xf_loc = xf[self.facet_gdofs]
        xe = ge - np.einsum("eij,ej->ei", X, xf_loc)

        dc = self.space.new_field()
        dmu = self.space.new_field()
        dc.elem_coeffs[:] = xe[:, :mE]
        dmu.elem_coeffs[:] = xe[:, mE:]
        xf2 = xf.reshape(self.nf, 2 * mF)
        dc.facet_coeffs[:] = xf2[:, :mF]
        dmu.facet_coeffs[:] = xf2[:, mF:]
        return dc, dmu

    def solve_linear_monolithic(self, c: PairField, r_a: np.ndarray,
                                r_b: np.ndarray):
        """Unreduced sparse solve of the same Newton system (verification)."""
        Np = self.nonlinear_blocks(c)
        mE = self.mE
        g = (np.arange(self.ne) * mE)[:, None] + np.arange(mE)[None, :]
        rows = np.broadcast_to(g[:, :, None], Np.shape).ravel()
        cols = np.broadcast_to(g[:, None, :], Np.shape).ravel()
        Np_glob = sp.coo_matrix((Np.ravel(), (rows, cols)),
                                shape=(self.n_pair, self.n_pair)).tocsr()
        A, M = self.aD, self.mass_mat
        J = sp.bmat([[M / self.tau, A],
                     [self.kappa * A + Np_glob, -M]], format="csc")
        sol = spla.splu(J).solve(np.concatenate([-r_a, -r_b]))
        dc = self.space.new_field(sol[:self.n_pair].copy())
        dmu = self.space.new_field(sol[self.n_pair:].copy())
        return dc, dmu

    # -- Newton ---------------------------------------------------------------

    def step_objective(self, c: PairField, c_prev: PairField,
                       prev_vals: np.ndarray | None = None) -> float:
        """Variational objective whose stationarity condition is the step.

        Strictly convex on the mass-conserving affine slice: chemical convex
        part, linearized concave part, penalized gradient energy, plus the
        inverse-Laplacian proximal distance to the previous state. Used as
        the line-search merit when a raw residual decrease is not available.
        """
        if self._lift_solver is None:
            self._lift_solver = ConstrainedSolver(self.aD, self.int_vec)
        vals = self._quad_vals(c)
        if prev_vals is None:
            prev_vals = self._quad_vals(c_prev)
        chem = self.space.integrate_elem(
            self.potential.phi_plus(vals)
            + self.potential.dphi_minus(prev_vals) * vals)
        quad = 0.5 * self.kappa * float(c.coeffs @ (self.aD @ c.coeffs))
        w = c.coeffs - c_prev.coeffs
        mw = self.mass_mat @ w
        lift = self._lift_solver.solve(mw)
        prox = 0.5 / self.tau * float(w @ (self.mass_mat @ lift))
        return chem + quad + prox

    def newton_step(self, c_prev: PairField, mu_prev: PairField,
                    guess: str = "previous",
                    solver: str = "condensed"):
        """One implicit step. Returns (c, mu, report); raises StepFailure
        after max_newton iterations without convergence.

        Line search: the full step is accepted on a residual-norm decrease;
        otherwise the step is halved while the convex step objective does
        not decrease (the objective is a guaranteed descent metric for the
        Newton direction, the raw residual norm is not).
        """
        if guess == "previous":
            c = c_prev.copy()
            mu = mu_prev.copy()
        elif guess == "zero":
            c = self.space.new_field()
            mu = self.space.new_field()
        else:
            raise ValueError(f"unknown initial guess {guess!r}")

        solve = (self.solve_linear_condensed if solver == "condensed"
                 else self.solve_linear_monolithic)
        prev_vals = self._quad_vals(c_prev)
        r_a, r_b = self.residual(c, mu, c_prev)
        rnorm = float(np.hypot(np.linalg.norm(r_a), np.linalg.norm(r_b)))
        r0 = rnorm
        tol = self.newton_rtol * (1.0 + r0)
        halvings_total = 0
        iters = 0
        while rnorm > tol:
            if iters >= self.max_newton:
                report = NewtonReport(False, iters, r0, rnorm, halvings_total)
                raise StepFailure(
                    f"Newton stalled at residual {rnorm:.3e} (tol {tol:.3e}) "
                    f"after {iters} iterations", report)
            dc, dmu = solve(c, r_a, r_b)
            c_try = PairField(c.dofmap, c.coeffs + dc.coeffs)
            mu_try = PairField(mu.dofmap, mu.coeffs + dmu.coeffs)
            ra_t, rb_t = self.residual(c_try, mu_try, c_prev)
            rn = float(np.hypot(np.linalg.norm(ra_t), np.linalg.norm(rb_t)))
            # The first full step annihilates the affine transport equation
            # exactly; damping afterwards keeps it zero, which makes the
            # convex objective a valid descent metric for the c-component.
            if rn >= rnorm and iters > 0:
                f0 = self.step_objective(c, c_prev, prev_vals)
                step = 1.0
                for h in range(self.max_halvings + 1):
                    c_try = PairField(c.dofmap, c.coeffs + step * dc.coeffs)
                    f_try = self.step_objective(c_try, c_prev, prev_vals)
                    if f_try < f0 or h == self.max_halvings:
                        halvings_total += h
                        break
                    step *= 0.5
                mu_try = PairField(mu.dofmap, mu.coeffs + step * dmu.coeffs)
                ra_t, rb_t = self.residual(c_try, mu_try, c_prev)
                rn = float(np.hypot(np.linalg.norm(ra_t), np.linalg.norm(rb_t)))
            c, mu, r_a, r_b, rnorm = c_try, mu_try, ra_t, rb_t, rn
            iters += 1
        return c, mu, NewtonReport(True, iters, r0, rnorm, halvings_total)

    # -- initial chemical potential --------------------------------------------

    def init_mu0(self, c0: PairField) -> PairField:
        """Initial potential from the 0,h Riesz lift of phi'(c0) + kappa aD c0."""
        vals = self._quad_vals(c0)
        dphi = self.potential.dphi_plus(vals) + self.potential.dphi_minus(vals)
        rhs = self._galerkin_vec(dphi) + self.kappa * (self.aD @ c0.coeffs)
        if self._mu0_solver is None:
            self._mu0_solver = spla.splu(self.suite.gram_0h.tocsc())
        return self.space.new_field(self._mu0_solver.solve(rhs))

    # -- ledgers ----------------------------------------------------------------

    def total_mass(self, c: PairField) -> float:
        return float(self.int_vec @ c.coeffs)

    def energy(self, c: PairField) -> float:
        """Free energy: chemical part plus kappa/2 times the penalized form."""
        vals = self._quad_vals(c)
        chem = self.space.integrate_elem(self.potential.phi(vals))
        return chem + 0.5 * self.kappa * float(c.coeffs @ (self.aD @ c.coeffs))

    def new_state(self, c0: PairField, mu0: PairField | None = None) -> SchemeState:
        mu0 = mu0 if mu0 is not None else self.init_mu0(c0)
        st = SchemeState(n=0, t=0.0, tau=self.tau, kappa=self.kappa,
                         c=c0.copy(), mu=mu0.copy())
        self._append_ledgers(st, 0)
        return st

    def _append_ledgers(self, st: SchemeState, iters: int) -> None:
        st.mass.append(self.total_mass(st.c))
        st.energy.append(self.energy(st.c))
        st.linf.append(self.space.linf_norm(st.c))
        st.mu_l2.append(self.space.l2_norm_elem(st.mu))
        st.newton_iters.append(iters)
        st.times.append(st.t)

    def advance(self, st: SchemeState, n_steps: int,
                on_step: Callable | None = None,
                checkpoint_every: int = 0,
                checkpoint_dir=None,
                guess: str = "previous") -> SchemeState:
        """March n_steps; ledgers are appended per step.

        On a step failure the last good state is checkpointed (when a
        directory is given) before the failure propagates.
        """
        for _ in range(n_steps):
            try:
                c, mu, rep = self.newton_step(st.c, st.mu, guess=guess)
            except StepFailure:
                if checkpoint_dir is not None:
                    save_checkpoint(
                        Path(checkpoint_dir) / f"failed_at_{st.n:06d}.chk",
                        self, st)
                raise
            st.c, st.mu = c, mu
            st.n += 1
            st.t = st.n * self.tau
            self._append_ledgers(st, rep.iterations)
            if on_step is not None:
                on_step(self, st, rep)
            if checkpoint_every and st.n % checkpoint_every == 0 \
                    and checkpoint_dir is not None:
                save_checkpoint(
                    Path(checkpoint_dir) / f"state_{st.n:06d}.chk", self, st)
        return st


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, scheme: CahnHilliardScheme, st: SchemeState) -> None:
    """Versioned binary state dump (magic HDGCH1, little-endian payload)."""
    space = scheme.space
    mesh = space.mesh
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", 1))  # version
        if mesh.structured_n is not None:
            fh.write(struct.pack("<II", 0, mesh.structured_n))
        else:
            raise ValueError("checkpoints support structured meshes only")
        fh.write(struct.pack("<I", space.k))
        fh.write(struct.pack("<dddd", scheme.sigma, scheme.kappa,
                             scheme.tau, st.t))
        n = space.dofmap.n_dofs
        fh.write(struct.pack("<QQ", st.n, n))
        fh.write(st.c.coeffs.astype("<f8").tobytes())
        fh.write(st.mu.coeffs.astype("<f8").tobytes())
        L = len(st.mass)
        fh.write(struct.pack("<Q", L))
        for arr in (st.mass, st.energy, st.linf, st.mu_l2, st.times):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())
        fh.write(np.asarray(st.newton_iters, dtype="<i8").tobytes())


def load_checkpoint(path, space: FeSpace | None = None
                    ) -> tuple[SchemeState, dict]:
    """Read a checkpoint; returns the state and the run parameters.

    When ``space`` is provided it must match the stored mesh level and
    degree; otherwise the structured space is rebuilt.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    magic = raw[:6]
    off = 6
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    (version,) = take("<I")
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    kind, level = take("<II")
    if kind != 0:
        raise ValueError("unsupported mesh kind in checkpoint")
    (k,) = take("<I")
    sigma, kappa, tau, t = take("<dddd")
    n_step, ndofs = take("<QQ")
    if space is None:
        space = FeSpace(build_structured_mesh(level), k)
    if space.k != k or space.mesh.structured_n != level \
            or space.dofmap.n_dofs != ndofs:
        raise ValueError("checkpoint does not match the provided space")

    def take_arr(count, dtype="<f8"):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += count * np.dtype(dtype).itemsize
        return arr

    c = space.new_field(take_arr(ndofs))
    mu = space.new_field(take_arr(ndofs))
    (L,) = take("<Q")
    ledgers = [take_arr(L) for _ in range(5)]
    iters = take_arr(L, "<i8")
    st = SchemeState(
        n=int(n_step), t=t, tau=tau, kappa=kappa, c=c, mu=mu,
        mass=list(ledgers[0]), energy=list(ledgers[1]), linf=list(ledgers[2]),
        mu_l2=list(ledgers[3]), times=list(ledgers[4]),
        newton_iters=[int(v) for v in iters])
    meta = {"sigma": sigma, "kappa": kappa, "tau": tau, "k": k, "level": level}
    return st, meta
