import numpy as np
import pytest

from hdgch import mesh as hmesh
from hdgch import space as hspace


def make_space(n, k):
    return hspace.FeSpace(hmesh.build_structured_mesh(n), k)


# ---------------------------------------------------------------------------
# quadrature


@pytest.mark.parametrize("degree", [1, 2, 4, 6, 8, 12])
def test_triangle_rule_exactness(degree):
    pts, wts = hspace.triangle_rule(degree)
    assert (wts > 0).all()
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            exact = hspace._tri_monomial_integral(a, b)
            # unit-mass weights: integral = |T_ref| * sum(w f) with |T_ref|=1/2
            approx = 0.5 * np.sum(wts * pts[:, 0] ** a * pts[:, 1] ** b)
            assert abs(approx - exact) <= 1e-13


@pytest.mark.parametrize("degree", [1, 3, 4, 6])
def test_segment_rule_exactness(degree):
    pts, wts = hspace.segment_rule(degree)
    assert (wts > 0).all()
    for a in range(degree + 1):
        assert abs(np.sum(wts * pts ** a) - 1.0 / (a + 1)) <= 1e-14


def test_quadrature_degree_covers_quartic_nonlinearity():
    for k in (1, 2, 3):
        rule = hspace.QuadratureRule.for_degree(k)
        assert rule.tri_degree >= 3 * k + 1
        assert rule.tri_degree >= max(4 * k, 2 * k + 2)
        assert rule.seg_degree >= 2 * k + 2


def test_subdivided_rule_still_integrates():
    pts, wts = hspace.triangle_rule(4)
    sp2, sw2 = hspace.subdivide_triangle_rule(pts, wts, 2)
    assert sw2.sum() == pytest.approx(1.0, abs=1e-14)
    exact = hspace._tri_monomial_integral(3, 1)
    assert 0.5 * np.sum(sw2 * sp2[:, 0] ** 3 * sp2[:, 1]) == pytest.approx(
        exact, abs=1e-13)


# ---------------------------------------------------------------------------
# basis


@pytest.mark.parametrize("k", [1, 2, 3])
def test_gram_matrix_is_identity_under_quadrature(k):
    pts, wts = hspace.triangle_rule(2 * k)
    vals, _ = hspace.element_basis(k, pts)
    gram = np.einsum("iq,q,jq->ij", vals, wts, vals)
    m = (k + 1) * (k + 2) // 2
    assert np.abs(gram - np.eye(m)).max() <= 1e-12


def test_first_basis_function_is_unit_constant():
    # normalization convention: value 1/sqrt(2*area_ref) = 1 at any point
    vals, grads = hspace.element_basis(1, np.array([[1 / 3, 1 / 3]]))
    assert vals[0, 0] == pytest.approx(1.0, abs=1e-14)
    assert np.abs(grads[0]).max() <= 1e-14


@pytest.mark.parametrize("k", [1, 2])
def test_facet_basis_orthonormal(k):
    t, w = hspace.segment_rule(2 * k)
    vals = hspace.facet_basis(k, t)
    gram = np.einsum("iq,q,jq->ij", vals, w, vals)
    assert np.abs(gram - np.eye(k + 1)).max() <= 1e-13


def test_basis_rejects_k0():
    with pytest.raises(ValueError):
        hspace.element_basis(0, np.array([[0.3, 0.3]]))


# ---------------------------------------------------------------------------
# projection


@pytest.mark.parametrize("k", [1, 2])
def test_projection_reproduces_polynomials(k):
    space = make_space(3, k)

    def f(x, y):
        out = 1.0 + 2.0 * x - 0.5 * y
        if k >= 2:
            out = out + 0.25 * x * y - x ** 2
        return out

    field = space.project_l2(f)
    again = space.project_l2(f)
    # evaluate the projection at fresh points and compare with f
    pts = space.map_to_physical(np.array([[0.2, 0.3], [0.5, 0.1]]))
    for q in range(2):
        vals = space.evaluate(field, np.arange(space.mesh.n_elements), pts[:, q])
        assert np.abs(vals - f(pts[:, q, 0], pts[:, q, 1])).max() <= 1e-12
    assert np.abs(field.coeffs - again.coeffs).max() <= 1e-12


def test_projection_rate_two_for_k1():
    errs = []
    for n in (4, 8, 16):
        space = make_space(n, 1)
        f = lambda x, y: np.sin(np.pi * x) * np.cos(np.pi * y)
        field = space.project_l2(f)
        vals = space.elem_values_at_quad(field)
        xq = space.elem_qpts
        diff2 = (vals - f(xq[..., 0], xq[..., 1])) ** 2
        errs.append(np.sqrt(space.integrate_elem(diff2)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) <= 0.1)


def test_facet_projection_is_best_approximation():
    # facet L2 error of the facet projection never exceeds the trace error of
    # the element projection, facet by facet
    space = make_space(4, 1)
    f = lambda x, y: np.exp(x) * np.cos(2.0 * y)
    field = space.project_l2(f)
    mesh = space.mesh
    w = space.quad.seg_weights
    fvals = space.facet_values(field)           # (nf, Qf)
    xq = space.facet_qpts
    exact = f(xq[..., 0], xq[..., 1])
    err_facet = np.einsum("fq,q->f", (exact - fvals) ** 2, w) * mesh.facet_lengths
    for loc in range(3):
        fid = mesh.elem_facets[:, loc]
        tr = space.trace_values(field, loc)
        err_tr = np.einsum("eq,q->e", (exact[fid] - tr) ** 2, w) \
            * mesh.facet_lengths[fid]
        assert np.all(err_facet[fid] <= err_tr + 1e-14)


def test_projection_rejects_nonfinite():
    space = make_space(2, 1)
    with pytest.raises(ValueError, match="non-finite"):
        space.project_l2(lambda x, y: np.where(x > 0.4, np.inf, 1.0))


def test_projection_l2_stability():
    # ||pi_h f||_L2 <= ||f||_L2 + 1e-10 for random smooth f
    space = make_space(4, 1)
    rng = np.random.default_rng(7)
    tp, tw = hspace.subdivide_triangle_rule(
        space.quad.tri_points, space.quad.tri_weights, 2)
    xq = space.map_to_physical(tp)
    for _ in range(50):
        a = rng.uniform(-1, 1, 5)
        f = lambda x, y: (a[0] + a[1] * np.sin(3 * x) + a[2] * np.cos(2 * y)
                          + a[3] * x * y + a[4] * np.sin(x + y))
        field = space.project_l2(f)
        proj_norm = np.linalg.norm(field.elem_coeffs)  # orthonormal basis
        fv = f(xq[..., 0], xq[..., 1]) ** 2
        f_norm = np.sqrt(np.einsum("eq,q,e->", fv, tw, space.mesh.areas))
        assert proj_norm <= f_norm + 1e-10


# ---------------------------------------------------------------------------
# mean value


def test_mean_of_constant():
    space = make_space(3, 1)
    assert space.mean_value(space.constant_field(2.5)) == pytest.approx(2.5, abs=1e-13)


def test_mean_of_projected_coordinate():
    space = make_space(4, 1)
    field = space.project_l2(lambda x, y: x)
    assert space.mean_value(field) == pytest.approx(0.5, abs=1e-13)


def test_remove_mean():
    space = make_space(4, 2)
    field = space.project_l2(lambda x, y: x * y + 1.0)
    zm = space.remove_mean(field)
    assert abs(space.mean_value(zm)) <= 1e-13


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_consistent_with_quadrature_values():
    space = make_space(3, 2)
    field = space.project_l2(lambda x, y: np.sin(x + 2 * y))
    vals_quad = space.elem_values_at_quad(field)
    e = 5
    pts = space.elem_qpts[e]
    vals = space.evaluate(field, np.full(len(pts), e), pts)
    assert np.abs(vals - vals_quad[e]).max() <= 1e-13


def test_evaluate_linear_field_at_vertices():
    # nodal values recovered by solving the 3x3 Vandermonde system per element
    space = make_space(2, 1)
    f = lambda x, y: 1.0 + 3.0 * x - 2.0 * y
    field = space.project_l2(f)
    mesh = space.mesh
    for e in (0, 3, 7):
        tri = mesh.vertices[mesh.elements[e]]
        V = np.column_stack([np.ones(3), tri[:, 0], tri[:, 1]])
        nodal = np.linalg.solve(V, f(tri[:, 0], tri[:, 1]))
        vals = space.evaluate(field, np.full(3, e), tri)
        expect = V @ nodal
        assert np.abs(vals - expect).max() <= 1e-12


def test_evaluate_outside_element_raises():
    space = make_space(2, 1)
    field = space.constant_field(1.0)
    with pytest.raises(ValueError, match="outside"):
        space.evaluate(field, np.array([0]), np.array([[0.99, 0.99]]))


def test_evaluate_gradient_of_linear():
    space = make_space(2, 1)
    field = space.project_l2(lambda x, y: 2.0 * x - y)
    g = space.evaluate_gradient(field, np.array([0, 1]),
                                space.elem_qpts[:2, 0])
    assert np.abs(g - np.array([2.0, -1.0])).max() <= 1e-12


def test_linf_norm_of_linear_field():
    space = make_space(2, 1)
    field = space.project_l2(lambda x, y: x + y)
    # max over the unit square is 2 at the corner; lattice contains vertices
    assert space.linf_norm(field) == pytest.approx(2.0, abs=1e-12)
