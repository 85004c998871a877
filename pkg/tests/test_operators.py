import numpy as np
import pytest

from hdgch import forms as hforms
from hdgch import mesh as hmesh
from hdgch import operators as hops
from hdgch import space as hspace


def make_ops(n, k, sigma=None):
    space = hspace.FeSpace(hmesh.build_structured_mesh(n), k)
    return hops.DiscreteOperators(space, sigma=sigma)


def random_zero_mean(space, rng):
    f = space.new_field(rng.uniform(-1.0, 1.0, space.dofmap.n_dofs))
    return space.remove_mean(f)


# ---------------------------------------------------------------------------
# constrained solver plumbing


def test_constrained_solves_over_full_basis():
    # every unit right-hand side: constraint and residual at stated tolerances
    for n, k in ((2, 1), (4, 1), (2, 2)):
        ops = make_ops(n, k)
        space = ops.space
        m = ops.int_vec
        for i in range(space.dofmap.n_dofs):
            rhs = np.zeros(space.dofmap.n_dofs)
            rhs[i] = 1.0
            x = ops._solver_aD.solve(rhs)
            assert abs(m @ x) <= 1e-12 * max(np.linalg.norm(x), 1e-30)
            x2 = ops._solver_gram0h.solve(rhs)
            assert abs(m @ x2) <= 1e-12 * max(np.linalg.norm(x2), 1e-30)


def test_laplacian_of_constants_is_zero():
    ops = make_ops(4, 1)
    z = ops.discrete_laplacian(ops.space.constant_field(3.7))
    assert np.abs(z.coeffs).max() <= 1e-12


def test_laplacian_and_green_have_zero_mean_output():
    ops = make_ops(4, 2)
    rng = np.random.default_rng(0)
    w = ops.space.new_field(rng.uniform(-1, 1, ops.space.dofmap.n_dofs))
    for op in (ops.discrete_laplacian, ops.discrete_green):
        z = op(w)
        assert abs(ops.space.mean_value(z)) <= 1e-12


@pytest.mark.parametrize("n,k", [(2, 1), (4, 1), (8, 1), (2, 2), (4, 2), (8, 2)])
def test_green_inverts_laplacian(n, k):
    ops = make_ops(n, k)
    rng = np.random.default_rng(100 * n + k)
    for _ in range(20):
        w = random_zero_mean(ops.space, rng)
        z = ops.discrete_green(ops.discrete_laplacian(w))
        err = np.linalg.norm(w.coeffs + z.coeffs)
        assert err <= 1e-10 * np.linalg.norm(w.coeffs)


def test_green_accepts_facet_only_input():
    ops = make_ops(3, 1)
    w = ops.space.new_field()
    w.facet_coeffs[:] = 1.0
    z = ops.discrete_green(w)
    assert np.all(np.isfinite(z.coeffs))
    assert abs(ops.space.mean_value(z)) <= 1e-12


def test_laplacian_inverse_estimate_stable():
    # ||Lap_h w||_0h <= C/h ||w||_1h with C stable across the family
    rng = np.random.default_rng(5)
    worst = []
    for n in (4, 8, 16, 32):
        ops = make_ops(n, 1)
        suite = ops.suite
        h = ops.space.mesh.h
        r = 0.0
        for _ in range(30):
            w = random_zero_mean(ops.space, rng)
            z = ops.discrete_laplacian(w)
            r = max(r, suite.norm_0h(z) * h / suite.norm_1h(w))
        worst.append(r)
    worst = np.array(worst)
    assert np.all(worst[1:] <= worst[:-1] * 1.25)


def test_laplacian_of_elliptic_projection_converges_to_laplacian():
    # reference field cos(pi x) cos(pi y) has Neumann data; its projected
    # discrete Laplacian converges in L2 to the analytic Laplacian
    f = lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y)
    gf = lambda x, y: np.stack(
        [-np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
         -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)], axis=-1)
    lap = lambda x, y: -2.0 * np.pi ** 2 * np.cos(np.pi * x) * np.cos(np.pi * y)
    errs = []
    for n in (4, 8, 16):
        ops = make_ops(n, 1)
        space = ops.space
        w = ops.elliptic_projection(f, gf)
        z = ops.discrete_laplacian(w)
        vals = space.elem_values_at_quad(z)
        xq = space.elem_qpts
        errs.append(np.sqrt(space.integrate_elem(
            (vals - lap(xq[..., 0], xq[..., 1])) ** 2)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 1.0)


# ---------------------------------------------------------------------------
# source-lift operator


def test_j_operator_zero_input():
    ops = make_ops(3, 1)
    z = ops.j_operator(ops.space.new_field())
    assert np.abs(z.coeffs).max() <= 1e-14


def test_j_operator_rejects_nonzero_mean():
    ops = make_ops(3, 1)
    with pytest.raises(ValueError, match="nonzero mean"):
        ops.j_operator(ops.space.constant_field(1.0))


def test_j_operator_variational_identity_on_all_pairs():
    # aD(J w, v) = (w, v)_Omega extends to every test pair, not only zero-mean
    ops = make_ops(3, 1)
    rng = np.random.default_rng(14)
    w = random_zero_mean(ops.space, rng)
    z = ops.j_operator(w)
    mass = ops.suite.mass
    for _ in range(20):
        v = ops.space.new_field(rng.uniform(-1, 1, ops.space.dofmap.n_dofs))
        lhs = z.coeffs @ (ops.aD @ v.coeffs)
        rhs = w.coeffs @ (mass @ v.coeffs)
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(rhs))


def test_j_operator_bound_against_dg_norm():
    # |(w, v)_Omega| <= C ||J w||_1h ||v||_DG, C stable across meshes
    rng = np.random.default_rng(15)
    worst = []
    for n in (4, 8, 16):
        ops = make_ops(n, 1)
        suite = ops.suite
        r = 0.0
        for _ in range(20):
            w = random_zero_mean(ops.space, rng)
            v = ops.space.new_field(
                rng.uniform(-1, 1, ops.space.dofmap.n_dofs))
            z = ops.j_operator(w)
            val = abs(w.coeffs @ (suite.mass @ v.coeffs))
            r = max(r, val / (suite.norm_1h(z) * suite.norm_dg(v)))
        worst.append(r)
    worst = np.array(worst)
    assert np.all(worst[1:] <= worst[:-1] * 1.25)


def test_j_operator_differs_from_green_by_j0_term():
    # dense oracle: J w solves the Green problem with the j0 part of the
    # right-hand side removed
    ops = make_ops(2, 1)
    space = ops.space
    rng = np.random.default_rng(3)
    w = random_zero_mean(space, rng)
    w.facet_coeffs[:] = 0.0
    w = space.remove_mean(w)
    jw = ops.j_operator(w)
    gw = ops.discrete_green(w)
    n = space.dofmap.n_dofs
    m = ops.int_vec
    sys = np.zeros((n + 1, n + 1))
    sys[:n, :n] = ops.aD.toarray()
    sys[:n, n] = m
    sys[n, :n] = m
    rhs = np.append(ops.suite.j0 @ w.coeffs, 0.0)
    diff_oracle = np.linalg.solve(sys, rhs)[:n]
    assert np.abs((gw.coeffs - jw.coeffs) - diff_oracle).max() <= 1e-10


# ---------------------------------------------------------------------------
# elliptic projection


def test_elliptic_projection_reproduces_linears():
    ops = make_ops(3, 1)
    f = lambda x, y: 2.0 - x + 3.0 * y
    gf = lambda x, y: np.stack(
        [np.broadcast_to(-1.0, np.shape(x)),
         np.broadcast_to(3.0, np.shape(x))], axis=-1)
    proj = ops.elliptic_projection(f, gf)
    exact = ops.space.project_l2(f)
    assert np.abs(proj.coeffs - exact.coeffs).max() <= 1e-11


def test_elliptic_projection_mean_constraint():
    ops = make_ops(4, 1)
    f = lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y) + 0.3
    gf = lambda x, y: np.stack(
        [-np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
         -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)], axis=-1)
    proj = ops.elliptic_projection(f, gf)
    m = ops.int_vec
    assert abs(m @ proj.coeffs - ops._integral_of(f)) <= 1e-12


def test_initial_projection_elliptic_residual_over_basis():
    # defining equations hold against every dof after the solve
    ops = make_ops(2, 1)
    f = lambda x, y: np.sin(x) * np.cos(y)
    gf = lambda x, y: np.stack(
        [np.cos(x) * np.cos(y), -np.sin(x) * np.sin(y)], axis=-1)
    c0 = ops.initial_projection(f, mode="elliptic", grad_f=gf)
    rhs = ops._aD_pair_rhs(gf)
    resid = ops.aD @ c0.coeffs - rhs
    # residual lies in the span of the constraint vector (multiplier row)
    m = ops.int_vec / np.linalg.norm(ops.int_vec)
    resid = resid - (resid @ m) * m
    assert np.linalg.norm(resid) <= 1e-11 * max(1.0, np.linalg.norm(rhs))


def test_initial_projection_preserves_mean_both_modes():
    ops = make_ops(4, 1)
    f = lambda x, y: np.cos(np.pi * x) ** 2 + 0.1 * y
    gf = lambda x, y: np.stack(
        [-np.pi * np.sin(2 * np.pi * x),
         np.broadcast_to(0.1, np.shape(x))], axis=-1)
    target = ops._integral_of(f)
    for mode, kw in (("elliptic", {"grad_f": gf}), ("l2", {})):
        c0 = ops.initial_projection(f, mode=mode, **kw)
        assert abs(ops.int_vec @ c0.coeffs - target) <= 1e-12


def test_initial_projection_elliptic_requires_gradient():
    ops = make_ops(2, 1)
    with pytest.raises(ValueError, match="gradient"):
        ops.initial_projection(lambda x, y: np.sign(x - 0.5), mode="elliptic")


def test_initial_projection_unknown_mode():
    ops = make_ops(2, 1)
    with pytest.raises(ValueError, match="unknown"):
        ops.initial_projection(lambda x, y: x, mode="h1")


# ---------------------------------------------------------------------------
# series references


def test_series_transform_recovers_single_mode():
    space = hspace.FeSpace(hmesh.build_structured_mesh(8), 2)
    grid = hops.SeriesGrid(space, modes=8)
    f = lambda x, y: np.cos(2 * np.pi * x) * np.cos(np.pi * y)
    field = space.project_l2(f, subdivide=2)
    coeffs, tail = grid.transform(grid.elem_values(field))
    assert coeffs[2, 1] == pytest.approx(1.0, abs=5e-3)
    coeffs[2, 1] = 0.0
    assert np.abs(coeffs).max() <= 5e-3
    assert tail <= 1e-3


def test_vprime_norm_of_single_mode():
    # ||cos(pi x)||_V' = ||phi||_L2^2-weighted: sqrt(1/2 / (1 + pi^2))
    space = hspace.FeSpace(hmesh.build_structured_mesh(16), 2)
    grid = hops.SeriesGrid(space, modes=16)
    field = space.project_l2(lambda x, y: np.cos(np.pi * x), subdivide=1)
    val, trunc = grid.vprime_norm(field)
    expect = np.sqrt(0.5 / (1.0 + np.pi ** 2))
    assert val == pytest.approx(expect, rel=1e-3)
    assert trunc <= 1e-3


def test_green_rate_probe():
    # ||G_h w - pi_h G(w)||_L2 = O(h^2) ||w||_0h, ||.||_1h error = O(h)
    f = lambda x, y: (np.cos(np.pi * x) * np.cos(np.pi * y)
                      + 0.5 * np.cos(2 * np.pi * x))
    errs_l2, errs_1h = [], []
    for n in (4, 8, 16):
        ops = make_ops(n, 1)
        space = ops.space
        w = space.remove_mean(space.project_l2(f))
        gh = ops.discrete_green(w)
        grid = hops.SeriesGrid(space, modes=32)
        ref, tail = grid.green_reference(w)
        diff = gh - ref
        err_l2 = space.l2_norm_elem(diff) / ops.suite.norm_0h(w)
        errs_l2.append(err_l2)
        errs_1h.append(ops.suite.norm_1h(diff) / ops.suite.norm_0h(w))
        # truncated modes enter the reference damped by the eigenvalues and
        # must not pollute the measured error
        tail_effect = np.sqrt(tail) / (np.pi ** 2 * 32 ** 2)
        assert tail_effect <= 1e-2 * err_l2 * ops.suite.norm_0h(w)
    r_l2 = np.log2(np.array(errs_l2[:-1]) / np.array(errs_l2[1:]))
    r_1h = np.log2(np.array(errs_1h[:-1]) / np.array(errs_1h[1:]))
    assert np.all(r_l2 >= 1.6)
    assert np.all(r_1h >= 0.8)


# ---------------------------------------------------------------------------
# discrete Agmon / Gagliardo-Nirenberg probes


def agmon_ratio(ops, w):
    space = ops.space
    n1h = ops.suite.norm_1h(w)
    if n1h < 1e-12:
        return None
    lap = ops.discrete_laplacian(w)
    denom = np.sqrt(n1h) * np.sqrt(ops.suite.norm_0h(lap))
    return space.linf_norm(space.remove_mean(w)) / denom


def test_agmon_ratio_bounded_across_family():
    rng = np.random.default_rng(31)
    worst = []
    for n in (4, 8, 16, 32):
        ops = make_ops(n, 1)
        r = 0.0
        for _ in range(100):
            w = ops.space.new_field(
                rng.uniform(-1, 1, ops.space.dofmap.n_dofs))
            ratio = agmon_ratio(ops, w)
            if ratio is not None:
                r = max(r, ratio)
        worst.append(r)
    worst = np.array(worst)
    assert np.all(worst[1:] <= worst[:-1] * 1.25)


@pytest.mark.parametrize("p", [3, 4, 6])
def test_gagliardo_nirenberg_ratio_bounded(p):
    alpha = 0.5 + (2.0 / 2.0) * (0.5 - 1.0 / p)
    rng = np.random.default_rng(100 + p)
    worst = []
    for n in (4, 8, 16, 32):
        ops = make_ops(n, 1)
        r = 0.0
        for _ in range(60):
            w = random_zero_mean(ops.space, rng)
            n1h = ops.suite.norm_1h(w)
            if n1h < 1e-12:
                continue
            lap = ops.discrete_laplacian(w)
            denom = n1h ** (1 - alpha) * ops.suite.norm_0h(lap) ** alpha
            r = max(r, ops.space.grad_lp_norm(w, p) / denom)
        worst.append(r)
    worst = np.array(worst)
    assert np.all(worst[1:] <= worst[:-1] * 1.25)
