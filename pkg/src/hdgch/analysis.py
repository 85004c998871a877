"""Diagnostics, inequality probes, and the self-convergence harness.

Runs of the droplet experiment are compared across nested mesh levels by
evaluating the coarse solution exactly (polynomial restriction) at the fine
quadrature points, so the cross-mesh error carries no interpolation error.
Probe tables are deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field as dfield

import numpy as np
import scipy.ndimage

from .forms import NormSuite, coercivity_estimate, default_sigma
from .mesh import build_structured_mesh
from .operators import DiscreteOperators, SeriesGrid
from .scheme import CahnHilliardScheme, SchemeState, StepFailure
from .space import FeSpace, PairField, element_basis

__all__ = [
    "droplet_indicator",
    "cross_mesh_l2_error",
    "compute_rates",
    "run_droplet",
    "StudyConfig",
    "LevelRecord",
    "StudyReport",
    "convergence_study",
    "ProbeRecord",
    "probe_inequalities",
    "write_probe_csv",
    "Monitor",
    "sample_on_grid",
    "count_positive_components",
]


def droplet_indicator(x, y):
    """Two unit droplets: +1 on [1/8,1/2]^2 and [1/2,7/8]^2, -1 elsewhere."""
    inside = ((x >= 0.125) & (x <= 0.5) & (y >= 0.125) & (y <= 0.5)) | \
             ((x >= 0.5) & (x <= 0.875) & (y >= 0.5) & (y <= 0.875))
    return np.where(inside, 1.0, -1.0)


# ---------------------------------------------------------------------------
# cross-mesh errors


def _locate_in_structured(mesh, points: np.ndarray) -> np.ndarray:
    """Element ids containing the given points (structured meshes only)."""
    n = mesh.structured_n
    cs = 1.0 / n
    ix = np.clip((points[:, 0] // cs).astype(np.int64), 0, n - 1)
    iy = np.clip((points[:, 1] // cs).astype(np.int64), 0, n - 1)
    lx = points[:, 0] - ix * cs
    ly = points[:, 1] - iy * cs
    upper = (ly > lx).astype(np.int64)
    return 2 * (iy * n + ix) + upper


def cross_mesh_l2_error(space_a: FeSpace, field_a: PairField,
                        space_b: FeSpace, field_b: PairField) -> float:
    """L2 distance of two element fields on nested structured meshes.

    The integral uses the finer mesh's quadrature; the coarse polynomial is
    evaluated exactly on each fine element. Argument order is immaterial.
    Raises ValueError for non-nested pairs.
    """
    na, nb = space_a.mesh.structured_n, space_b.mesh.structured_n
    if not na or not nb:
        raise ValueError("cross-mesh errors require structured meshes")
    if space_a.mesh.split != space_b.mesh.split:
        raise ValueError("mesh pair is not nested (different split rule)")
    if na < nb:
        coarse, fine = (space_a, field_a), (space_b, field_b)
    else:
        coarse, fine = (space_b, field_b), (space_a, field_a)
    sc, fc = coarse[0], coarse[1]
    sf, ff = fine[0], fine[1]
    if sf.mesh.structured_n % sc.mesh.structured_n != 0:
        raise ValueError(
            f"mesh pair is not nested: {sc.mesh.structured_n} does not divide "
            f"{sf.mesh.structured_n}")

    centers = sf.mesh.vertices[sf.mesh.elements].mean(axis=1)
    parents = _locate_in_structured(sc.mesh, centers)

    xq = sf.elem_qpts                                       # (nef, Q, 2)
    vals_f = sf.elem_values_at_quad(ff)
    xi = np.einsum("eab,eqb->eqa", sc.jac_inv[parents],
                   xq - sc.v0[parents][:, None, :])
    nef, Q = xi.shape[:2]
    psi, _ = element_basis(sc.k, xi.reshape(-1, 2))
    psi = psi.reshape(sc.dofmap.elem_block, nef, Q)
    vals_c = np.einsum("em,meq->eq", fc.elem_coeffs[parents], psi) \
        / sc.sqrt_area[parents][:, None]
    return float(np.sqrt(sf.integrate_elem((vals_f - vals_c) ** 2)))


def compute_rates(errors) -> list:
    """rate_j = log2(e_{j-1} / e_j); None for the first entry."""
    rates: list = [None]
    for prev, cur in zip(errors[:-1], errors[1:]):
        rates.append(float(np.log2(prev / cur)))
    return rates


# ---------------------------------------------------------------------------
# droplet runs and the convergence study


def run_droplet(n: int, k: int, kappa: float, tau: float, n_steps: int,
                sigma: float | None = None, subdivide: int = 1,
                on_step=None, space: FeSpace | None = None
                ) -> tuple[CahnHilliardScheme, SchemeState]:
    if space is None:
        space = FeSpace(build_structured_mesh(n), k)
    scheme = CahnHilliardScheme(space, kappa=kappa, tau=tau, sigma=sigma)
    c0 = space.project_l2(droplet_indicator, subdivide=subdivide)
    st = scheme.new_state(c0)
    scheme.advance(st, n_steps, on_step=on_step)
    return scheme, st


@dataclass
class StudyConfig:
    j_min: int = 2
    j_max: int = 4
    j_fine: int = 5
    kappas: tuple = (2.0 ** -8,)
    k: int = 1
    T: float = 0.1
    tau0: float = 0.1  # tau_j = tau0 / 4^j
    sigma: float | None = None

    def tau(self, j: int) -> float:
        return self.tau0 / 4.0 ** j

    def steps(self, j: int) -> int:
        ratio = self.T / self.tau(j)
        n = round(ratio)
        if abs(ratio - n) > 1e-9 * max(ratio, 1.0):
            raise ValueError(
                f"T={self.T} is not an integer multiple of tau_{j}={self.tau(j)}")
        return int(n)


@dataclass
class LevelRecord:
    j: int
    h: float
    tau: float
    kappa: float
    error: float
    rate: float | None
    wall_time: float
    steps: int
    newton_median: float
    newton_max: int


@dataclass
class StudyReport:
    levels: list = dfield(default_factory=list)
    eval_rule: str = ""
    fine_j: int | None = None

    def write_table1(self, path) -> None:
        """Deterministic CSV: columns j, h, tau, kappa, error, rate."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "h", "tau", "kappa", "error", "rate"])
            for r in self.levels:
                w.writerow([
                    r.j, f"{r.h:.17g}", f"{r.tau:.17g}", f"{r.kappa:.17g}",
                    f"{r.error:.17g}",
                    "" if r.rate is None else f"{r.rate:.17g}"])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"error evaluation rule: {self.eval_rule}\n")
            fh.write(f"reference level: {self.fine_j}\n")
            for r in self.levels:
                fh.write(
                    f"j={r.j} kappa={r.kappa:.6g} error={r.error:.6e} "
                    f"rate={'' if r.rate is None else f'{r.rate:.4f}'} "
                    f"steps={r.steps} newton_median={r.newton_median:.1f} "
                    f"newton_max={r.newton_max} wall={r.wall_time:.2f}s\n")


def convergence_study(cfg: StudyConfig, out_dir=None,
                      on_level=None) -> StudyReport:
    """Self-convergence table against the fine-level run, per kappa.

    A failed run aborts the study; the partial table is persisted to
    ``out_dir`` before the failure propagates.
    """
    if cfg.j_fine <= cfg.j_max:
        raise ValueError("the reference level must be finer than j_max")
    report = StudyReport(fine_j=cfg.j_fine)
    report.eval_rule = (
        "cross-mesh L2 at final time: fine-mesh quadrature, coarse field "
        "restricted exactly per fine element")
    try:
        for kappa in cfg.kappas:
            t0 = time.perf_counter()
            fine_scheme, fine_state = run_droplet(
                2 ** cfg.j_fine, cfg.k, kappa, cfg.tau(cfg.j_fine),
                cfg.steps(cfg.j_fine), sigma=cfg.sigma)
            if on_level is not None:
                on_level(cfg.j_fine, kappa, time.perf_counter() - t0)
            errors = []
            for j in range(cfg.j_min, cfg.j_max + 1):
                t0 = time.perf_counter()
                scheme, state = run_droplet(
                    2 ** j, cfg.k, kappa, cfg.tau(j), cfg.steps(j),
                    sigma=cfg.sigma)
                err = cross_mesh_l2_error(
                    scheme.space, state.c, fine_scheme.space, fine_state.c)
                wall = time.perf_counter() - t0
                errors.append(err)
                iters = state.newton_iters[1:]
                report.levels.append(LevelRecord(
                    j=j, h=1.0 / 2 ** j, tau=cfg.tau(j), kappa=kappa,
                    error=err, rate=None, wall_time=wall,
                    steps=cfg.steps(j),
                    newton_median=float(np.median(iters)),
                    newton_max=int(np.max(iters))))
                if on_level is not None:
                    on_level(j, kappa, wall)
            rates = compute_rates(errors)
            base = len(report.levels) - len(errors)
            for i, rate in enumerate(rates):
                report.levels[base + i].rate = rate
    except StepFailure:
        if out_dir is not None:
            report.write_table1(f"{out_dir}/table1_partial.csv")
        raise
    return report


# ---------------------------------------------------------------------------
# inequality probes


@dataclass
class ProbeRecord:
    family: str
    variant: str
    n: int
    h: float
    k: int
    sigma: float
    samples: int
    value: float
    note: str = ""


def _rng_for(seed: int, family_index: int, level_index: int):
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(family_index, level_index))
    return np.random.default_rng(ss)


def _random_pair(space, rng) -> PairField:
    return space.new_field(rng.uniform(-1.0, 1.0, space.dofmap.n_dofs))


def probe_inequalities(levels=(4, 8, 16, 32), k: int = 1,
                       samples: int = 100, seed: int = 0,
                       sigma: float | None = None,
                       dual_samples: int = 8,
                       dual_modes: int = 48) -> list[ProbeRecord]:
    """Max-ratio tables for the discrete inequality suite.

    Ten probe families: poincare, dg_1h, equiv, j0, inverse, agmon, gn,
    lapl, green, ad. Same seed gives bit-identical tables. Probes report on
    any structured level; assertions live in the test-suite.
    """
    sigma = default_sigma(k) if sigma is None else sigma
    records: list[ProbeRecord] = []

    for li, n in enumerate(levels):
        space = FeSpace(build_structured_mesh(n), k)
        ops = DiscreteOperators(space, sigma=sigma)
        suite = ops.suite
        h = space.mesh.h
        add = lambda fam, var, samp, val, note="": records.append(
            ProbeRecord(fam, var, n, h, k, sigma, samp, float(val), note))

        # 0: poincare   ||v||_L2 <= C (||v||_1h^2 + vbar^2)^(1/2)
        rng = _rng_for(seed, 0, li)
        worst = 0.0
        for _ in range(samples):
            v = _random_pair(space, rng)
            worst = max(worst, suite.norm_l2(v) / np.hypot(
                suite.norm_1h(v), space.mean_value(v)))
        add("poincare", "l2", samples, worst)

        # 1: dg norm bounded by the 1,h norm
        rng = _rng_for(seed, 1, li)
        worst = 0.0
        for _ in range(samples):
            v = _random_pair(space, rng)
            n1h = suite.norm_1h(v)
            if n1h < 1e-12:
                continue
            worst = max(worst, suite.norm_dg(v) / n1h)
        add("dg_1h", "ratio", samples, worst)

        # 2: norm equivalence 1,h vs 1,h,*
        rng = _rng_for(seed, 2, li)
        worst = 0.0
        for _ in range(samples):
            v = _random_pair(space, rng)
            n1h = suite.norm_1h(v)
            if n1h < 1e-12:
                continue
            worst = max(worst, suite.norm_1h_star(v) / n1h)
        add("equiv", "star_over_1h", samples, worst)

        # 3: j0 bounds
        rng = _rng_for(seed, 3, li)
        w_h2, w_mixed = 0.0, 0.0
        for _ in range(samples):
            u = _random_pair(space, rng)
            v = _random_pair(space, rng)
            w_h2 = max(w_h2, suite.j0_value(v, v) / (h * suite.norm_1h(v)) ** 2)
            w_mixed = max(w_mixed, abs(suite.j0_value(u, v))
                          / (h * suite.norm_0h(u) * suite.norm_1h(v)))
        add("j0", "h2_vs_1h", samples, w_h2)
        add("j0", "mixed_0h_1h", samples, w_mixed)

        # 4: inverse estimates
        rng = _rng_for(seed, 4, li)
        w_leb, w_loc, w_10 = 0.0, 0.0, 0.0
        diam = space.mesh.diameters
        for _ in range(samples):
            v = _random_pair(space, rng)
            w_leb = max(w_leb, space.linf_norm(v) * h / space.l2_norm_elem(v))
            grads = space.elem_grads_at_quad(v)
            ge = np.sqrt(np.einsum("eqa,eqa,q->e", grads, grads,
                                   space.quad.tri_weights)
                         * space.mesh.areas)
            ve = np.linalg.norm(v.elem_coeffs, axis=1)
            mask = ve > 1e-12
            w_loc = max(w_loc, np.max(ge[mask] * diam[mask] / ve[mask]))
            w_10 = max(w_10, h * suite.norm_1h(v) / suite.norm_0h(v))
        add("inverse", "lebesgue_2_inf", samples, w_leb)
        add("inverse", "local_grad", samples, w_loc)
        add("inverse", "1h_vs_0h", samples, w_10)

        # 5: discrete Agmon
        rng = _rng_for(seed, 5, li)
        worst = 0.0
        for _ in range(samples):
            v = _random_pair(space, rng)
            n1h = suite.norm_1h(v)
            if n1h < 1e-12:
                continue
            lap = ops.discrete_laplacian(v)
            denom = np.sqrt(n1h) * np.sqrt(suite.norm_0h(lap))
            worst = max(worst, space.linf_norm(space.remove_mean(v)) / denom)
        add("agmon", "linf", samples, worst)

        # 6: discrete Gagliardo-Nirenberg, p in {3, 4, 6}
        for p in (3, 4, 6):
            rng = _rng_for(seed, 6 + p, li)
            alpha = 0.5 + (0.5 - 1.0 / p)
            worst = 0.0
            for _ in range(samples):
                v = space.remove_mean(_random_pair(space, rng))
                n1h = suite.norm_1h(v)
                if n1h < 1e-12:
                    continue
                lap = ops.discrete_laplacian(v)
                denom = n1h ** (1 - alpha) * suite.norm_0h(lap) ** alpha
                worst = max(worst, space.grad_lp_norm(v, p) / denom)
            add("gn", f"p{p}", samples, worst)

        # 7: discrete Laplacian bounds
        rng = _rng_for(seed, 13, li)
        worst = 0.0
        for _ in range(samples):
            v = space.remove_mean(_random_pair(space, rng))
            n1h = suite.norm_1h(v)
            if n1h < 1e-12:
                continue
            lap = ops.discrete_laplacian(v)
            worst = max(worst, h * suite.norm_0h(lap) / n1h)
        add("lapl", "0h_inverse", samples, worst)
        rng = _rng_for(seed, 14, li)
        grid = SeriesGrid(space, modes=dual_modes)
        worst, trunc_worst = 0.0, 0.0
        for _ in range(dual_samples):
            v = space.remove_mean(_random_pair(space, rng))
            n1h = suite.norm_1h(v)
            if n1h < 1e-12:
                continue
            lap = ops.discrete_laplacian(v)
            val, trunc = grid.vprime_norm(lap)
            worst = max(worst, val / n1h)
            trunc_worst = max(trunc_worst, trunc)
        add("lapl", "dual_norm", dual_samples, worst,
            note=f"modes={dual_modes} trunc<={trunc_worst:.3e}")

        # 8: Green operator error rates (one manufactured field)
        f = lambda x, y: (np.cos(np.pi * x) * np.cos(np.pi * y)
                          + 0.5 * np.cos(2 * np.pi * x))
        wfield = space.remove_mean(space.project_l2(f))
        gh = ops.discrete_green(wfield)
        ref, _ = grid.green_reference(wfield)
        n0h = suite.norm_0h(wfield)
        diff = gh - ref
        add("green", "l2_over_h2", 1,
            space.l2_norm_elem(diff) / (h ** 2 * n0h))
        add("green", "1h_over_h", 1, suite.norm_1h(diff) / (h * n0h))

        # 9: bilinear form constants
        rng = _rng_for(seed, 15, li)
        vals = []
        for _ in range(samples):
            v = _random_pair(space, rng)
            vals.append(float(v.coeffs @ (ops.aD @ v.coeffs))
                        / suite.norm_1h(v) ** 2)
        add("ad", "continuity_median_rayleigh", samples, np.median(vals))
        if space.dofmap.n_dofs <= 2500:
            add("ad", "coercivity", 0,
                coercivity_estimate(space, sigma, aD=ops.aD),
                note="dense probe")
    return records


def write_probe_csv(records: list[ProbeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "variant", "n", "h", "k", "sigma", "samples",
                    "value", "note"])
        for r in records:
            w.writerow([r.family, r.variant, r.n, f"{r.h:.17g}", r.k,
                        f"{r.sigma:.17g}", r.samples, f"{r.value:.17g}",
                        r.note])


# ---------------------------------------------------------------------------
# per-step monitor


class Monitor:
    """Append-only per-step CSV ledger, flushed every step.

    With ``operators`` given, also records the 1,h norms entering the
    stability functional and its running dissipation sum.
    """

    columns = ["n", "t", "mass", "energy", "mu_l2", "c_linf", "newton_iters"]
    detail_columns = ["mu_1h", "dtau_c_1h", "lift_dtau_c_1h", "stability_sum"]

    def __init__(self, path, scheme: CahnHilliardScheme,
                 operators: DiscreteOperators | None = None):
        self.scheme = scheme
        self.operators = operators
        self._prev_c = None
        self._stability_sum = 0.0
        cols = list(self.columns)
        if operators is not None:
            cols += self.detail_columns
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(cols)
        self._fh.flush()

    def write_state(self, st: SchemeState) -> None:
        row = [st.n, f"{st.t:.17g}", f"{st.mass[-1]:.17g}",
               f"{st.energy[-1]:.17g}", f"{st.mu_l2[-1]:.17g}",
               f"{st.linf[-1]:.17g}", st.newton_iters[-1]]
        if self.operators is not None:
            suite = self.scheme.suite
            mu_1h = suite.norm_1h(st.mu)
            if self._prev_c is None or st.n == 0:
                dt_1h = 0.0
                lift_1h = 0.0
            else:
                dtc = self.scheme.space.new_field(
                    (st.c.coeffs - self._prev_c) / st.tau)
                dt_1h = suite.norm_1h(dtc)
                lift = self.operators.j_operator(
                    self.scheme.space.remove_mean(dtc))
                lift_1h = suite.norm_1h(lift)
                self._stability_sum += st.tau * (
                    mu_1h ** 2 + 0.5 * st.kappa * st.tau * dt_1h ** 2
                    + lift_1h ** 2)
            row += [f"{mu_1h:.17g}", f"{dt_1h:.17g}", f"{lift_1h:.17g}",
                    f"{self._stability_sum:.17g}"]
        self._prev_c = st.c.coeffs.copy()
        self._writer.writerow(row)
        self._fh.flush()

    def __call__(self, scheme, st: SchemeState, report) -> None:
        self.write_state(st)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# qualitative classification


def sample_on_grid(space: FeSpace, field: PairField, res: int = 256
                   ) -> np.ndarray:
    """Element-part values at the res x res cell-center grid (structured)."""
    if not space.mesh.structured_n:
        raise ValueError("grid sampling requires the structured mesh")
    t = (np.arange(res) + 0.5) / res
    X, Y = np.meshgrid(t, t, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    elems = _locate_in_structured(space.mesh, pts)
    xi = np.einsum("pab,pb->pa", space.jac_inv[elems], pts - space.v0[elems])
    psi, _ = element_basis(space.k, xi)
    vals = np.einsum("pm,mp->p", field.elem_coeffs[elems], psi) \
        / space.sqrt_area[elems]
    return vals.reshape(res, res)


def count_positive_components(values: np.ndarray) -> int:
    """Connected components (4-neighborhood) of the positive region."""
    _, count = scipy.ndimage.label(values > 0.0)
    return int(count)
