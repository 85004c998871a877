import numpy as np
import pytest

from hdgch import mesh as hmesh


def barycentric(tri, pts):
    """Barycentric coordinates of pts w.r.t. triangle tri (3, 2)."""
    T = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    xi = np.linalg.solve(T, (np.atleast_2d(pts) - tri[0]).T).T
    return np.column_stack([1.0 - xi.sum(axis=1), xi])


def test_smallest_structured_mesh_counts():
    m = hmesh.build_structured_mesh(1)
    assert m.n_elements == 2
    assert m.n_vertices == 4
    assert m.n_facets == 5
    assert int((~m.boundary_mask).sum()) == 1


def test_structured_family_sizes():
    m = hmesh.build_structured_mesh(8)
    assert m.n_elements == 128
    assert m.cell_size == pytest.approx(1.0 / 8.0)
    assert m.h == pytest.approx(np.sqrt(2.0) / 8.0)


def test_area_sums_to_domain_area():
    for n in (1, 3, 8, 16):
        m = hmesh.build_structured_mesh(n)
        assert abs(m.domain_area - 1.0) <= 1e-13


def test_normals_match_minus_side_outward_normal():
    m = hmesh.build_structured_mesh(5)
    for f in range(m.n_facets):
        rec = m.facet(f)
        if rec.on_boundary:
            continue
        tri = m.vertices[m.elements[rec.elem_minus]]
        loc = rec.local_minus
        t = tri[(loc + 1) % 3] - tri[loc]
        n_ref = np.array([t[1], -t[0]])
        n_ref /= np.linalg.norm(n_ref)
        assert np.linalg.norm(n_ref - rec.normal) <= 1e-14
        assert rec.elem_plus > rec.elem_minus


def test_facet_length_bounded_by_neighbor_diameters():
    m = hmesh.build_structured_mesh(4)
    for f in range(m.n_facets):
        rec = m.facet(f)
        assert rec.length <= m.diameters[rec.elem_plus] + 1e-15
        if not rec.on_boundary:
            assert rec.length <= m.diameters[rec.elem_minus] + 1e-15


def test_refinement_is_nested():
    # every child barycenter of mesh(2n) lies inside a parent of mesh(n)
    for j in range(5):
        coarse = hmesh.build_structured_mesh(2 ** j)
        fine = hmesh.build_structured_mesh(2 ** (j + 1))
        centers = fine.vertices[fine.elements].mean(axis=1)
        covered = np.zeros(len(centers), dtype=bool)
        for e in range(coarse.n_elements):
            tri = coarse.vertices[coarse.elements[e]]
            b = barycentric(tri, centers)
            covered |= (b.min(axis=1) >= -1e-12)
        assert covered.all()


def test_n2_children_of_n1():
    coarse = hmesh.build_structured_mesh(1)
    fine = hmesh.build_structured_mesh(2)
    assert fine.n_elements == 8
    for e in range(coarse.n_elements):
        tri = coarse.vertices[coarse.elements[e]]
        centers = fine.vertices[fine.elements].mean(axis=1)
        b = barycentric(tri, centers)
        inside = (b.min(axis=1) >= -1e-12)
        assert inside.sum() == 4  # union of exactly 4 children


def test_validate_structured():
    rep = hmesh.validate(hmesh.build_structured_mesh(8))
    assert rep.conforming
    assert rep.orientation_ok
    assert rep.min_angle_deg == pytest.approx(45.0, abs=1e-10)
    assert rep.area_total == pytest.approx(1.0, abs=1e-13)


def test_min_angle_uniform_across_family():
    r1 = hmesh.validate(hmesh.build_structured_mesh(1))
    r64 = hmesh.validate(hmesh.build_structured_mesh(64))
    assert r1.min_angle_deg == pytest.approx(r64.min_angle_deg, abs=1e-10)


def test_validate_flags_flipped_normal():
    m = hmesh.build_structured_mesh(3)
    f = int(np.where(~m.boundary_mask)[0][0])
    m.facet_normals[f] = -m.facet_normals[f]
    rep = hmesh.validate(m)
    assert not rep.orientation_ok


def test_roundtrip_export_import(tmp_path):
    m = hmesh.build_structured_mesh(4)
    path = tmp_path / "mesh.txt"
    hmesh.export_mesh(m, path)
    m2 = hmesh.import_mesh(path)
    assert np.array_equal(m.elements, m2.elements)
    assert np.array_equal(m.vertices, m2.vertices)
    assert np.array_equal(m.facet_vertices, m2.facet_vertices)
    assert np.array_equal(m.facet_elems, m2.facet_elems)


def test_import_duplicate_element_rejected(tmp_path):
    path = tmp_path / "dup.txt"
    path.write_text(
        "hdgmesh 2d\n4\n0 0\n1 0\n1 1\n0 1\n3\n0 1 2\n0 2 3\n0 1 2\n")
    with pytest.raises(hmesh.MeshError, match="non-conforming"):
        hmesh.import_mesh(path)


def test_import_clockwise_reoriented_with_warning(tmp_path):
    path = tmp_path / "cw.txt"
    # second triangle is clockwise (signed area oracle below)
    path.write_text("hdgmesh 2d\n4\n0 0\n1 0\n1 1\n0 1\n2\n0 1 2\n0 3 2\n")
    verts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    tri = verts[[0, 3, 2]]
    d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
    signed = 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])
    assert signed < 0
    with pytest.warns(UserWarning, match="reoriented"):
        m = hmesh.import_mesh(path)
    assert (hmesh._signed_areas(m.vertices, m.elements) > 0).all()


def test_import_parse_failure(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("hdgmesh 2d\n2\n0 0\n")
    with pytest.raises(hmesh.MeshError, match="parse failure"):
        hmesh.import_mesh(path)


def test_degenerate_element_rejected():
    verts = np.array([[0, 0], [1, 0], [2, 0]], dtype=float)
    with pytest.raises(hmesh.MeshError, match="degenerate"):
        hmesh.from_arrays(verts, np.array([[0, 1, 2]]))


def test_single_triangle_mesh():
    verts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    m = hmesh.from_arrays(verts, np.array([[0, 1, 2]]))
    assert m.n_facets == 3
    assert m.boundary_mask.all()
    assert m.domain_area == pytest.approx(0.5)
