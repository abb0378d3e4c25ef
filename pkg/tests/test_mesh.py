"""Mesh generator and surface-integral tests."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lamewave import mesh as M
from lamewave.errors import GeometryError, ResourceLimitError, ValidationError


def test_box_refinement1_counts():
    m = M.generate_structure_mesh(M.shape("box", 1, 1, 1), 1)
    assert m.num_vertices == 27
    assert m.num_cells == 48
    assert_allclose(m.volume(), 1.0, rtol=1e-14)


def test_square_perimeter_exact():
    m = M.generate_structure_mesh(M.shape("square", 2.0), 2)
    per = m.facet_measure[m.facet_tag == M.INTERFACE].sum()
    assert abs(per - 8.0) <= 1e-12


@pytest.mark.parametrize("refinement", [1, 2, 3])
def test_ball_boundary_facet_centroids(refinement):
    m = M.generate_structure_mesh(M.shape("ball", 1.0), refinement)
    h = m.max_cell_diameter()
    ids = m.facet_ids(M.INTERFACE)
    centroids = m.verts[m.facet_verts[ids]].mean(axis=1)
    err = np.abs(np.linalg.norm(centroids, axis=1) - 1.0)
    assert err.max() <= h * h


def test_ball_vertices_exactly_on_sphere():
    m = M.generate_structure_mesh(M.shape("ball", 2.5), 2)
    r = np.linalg.norm(m.verts[m.interface_vertices()], axis=1)
    assert np.abs(r - 2.5).max() < 1e-13


def test_ellipsoid_boundary_vertices_on_surface():
    a, b, c = 1.0, 1.3, 0.8
    m = M.generate_structure_mesh(M.shape("ellipsoid", a, b, c), 2)
    v = m.verts[m.interface_vertices()]
    q = (v[:, 0] / a) ** 2 + (v[:, 1] / b) ** 2 + (v[:, 2] / c) ** 2
    assert np.abs(q - 1.0).max() < 1e-12


@pytest.mark.parametrize("kind,params,exact", [
    ("ball", (1.0,), 4 * math.pi / 3),
    ("ellipsoid", (1.0, 1.3, 0.8), 4 * math.pi / 3 * 1.3 * 0.8),
    ("disk", (1.0,), math.pi),
])
def test_volume_error_decreases_under_refinement(kind, params, exact):
    errs = []
    for r in (1, 2, 3):
        m = M.generate_structure_mesh(M.shape(kind, *params), r)
        errs.append(abs(m.volume() - exact))
    assert errs[0] > errs[1] > errs[2]


def test_half_grid_halves_mesh_size():
    h = [M.generate_structure_mesh(M.shape("box", 1, 1, 1), r).max_cell_diameter()
         for r in (1, 2, 3)]
    for a, b in zip(h, h[1:]):
        assert abs(b / a - 0.5) < 0.2 * 0.5


def test_normals_unit_and_outward():
    m = M.generate_structure_mesh(M.shape("ball", 1.0), 2)
    norms = np.linalg.norm(m.facet_normal, axis=1)
    assert np.abs(norms - 1.0).max() <= 1e-12
    ids = m.facet_ids(M.INTERFACE)
    centroids = m.verts[m.facet_verts[ids]].mean(axis=1)
    # convex domain centered at origin: outward normal has n . x > 0
    assert (np.einsum("ij,ij->i", m.facet_normal[ids], centroids) > 0).all()


def test_closed_surface_identity():
    for spec, r in ((M.shape("ball", 1.0), 2), (M.shape("box", 1, 2, 1), 2),
                    (M.shape("disk", 1.0), 3)):
        m = M.generate_structure_mesh(spec, r)
        ids = m.facet_ids(M.INTERFACE)
        s = (m.facet_measure[ids, None] * m.facet_normal[ids]).sum(axis=0)
        area = m.facet_measure[ids].sum()
        assert np.abs(s).max() <= 1e-10 * area


def test_coupled_ball_in_ball_fluid_volume():
    exact = 4 * math.pi / 3 * (2**3 - 1)
    errs = []
    for rs, rf in ((2, 2), (3, 3)):
        s = M.generate_structure_mesh(M.shape("ball", 1.0), rs)
        c = M.generate_coupled_mesh(s, M.shape("ball", 2.0), rf)
        errs.append(abs(c.volume(M.FLUID) - exact) / exact)
    assert errs[0] <= 0.03
    assert errs[1] < errs[0]


def test_coupled_structure_recovery_bit_identical():
    s = M.generate_structure_mesh(M.shape("ball", 1.0), 2)
    c = M.generate_coupled_mesh(s, M.shape("ball", 2.0), 1)
    s2 = M.extract_structure(c)
    assert np.array_equal(s2.verts, s.verts)
    assert np.array_equal(s2.cells, s.cells)
    assert s2 == s


def test_coupled_touching_raises():
    s = M.generate_structure_mesh(M.shape("ball", 1.0), 1)
    with pytest.raises(GeometryError):
        M.generate_coupled_mesh(s, M.shape("ball", 1.0), 1)


def test_coupled_square_in_box_and_region_tags():
    s = M.generate_structure_mesh(M.shape("box", 1, 1, 1), 1)
    c = M.generate_coupled_mesh(s, M.shape("box", 4, 4, 4), 1)
    reg = c.vertex_region()
    iface = c.interface_vertices()
    assert (reg[iface] == 2).all()
    assert not set(iface.tolist()) & set(c.outer_vertices().tolist())
    # solid cells listed first and bit-matching the structure ordering
    assert (c.cell_region[: s.num_cells] == M.SOLID).all()


def test_disk_in_square_euler_formula():
    s = M.generate_structure_mesh(M.shape("disk", 1.0), 2)
    c = M.generate_coupled_mesh(s, M.shape("square", 4.0), 2)
    edges = set()
    for tri in c.cells:
        t = sorted(int(v) for v in tri)
        edges.update({(t[0], t[1]), (t[0], t[2]), (t[1], t[2])})
    v, e, f = c.num_vertices, len(edges), c.num_cells
    assert v - e + f == 1


def test_surface_integral_divergence_theorem():
    s = M.generate_structure_mesh(M.shape("ball", 1.0), 2)
    c = M.generate_coupled_mesh(s, M.shape("ball", 2.0), 1)
    got = M.surface_integral_normal_dot(c, c.verts, M.INTERFACE)
    assert_allclose(got, 3 * c.volume(M.SOLID), atol=1e-10)
    got_outer = M.surface_integral_normal_dot(c, c.verts, M.OUTER)
    assert_allclose(got_outer, 3 * c.volume(), atol=1e-10)


def test_surface_integral_skew_field_vanishes():
    m = M.generate_structure_mesh(M.shape("ball", 1.0), 2)
    K = np.array([[0.0, 1.0, -2.0], [-1.0, 0.0, 0.5], [2.0, -0.5, 0.0]])
    field = m.verts @ K.T
    area = m.facet_measure[m.facet_tag == M.INTERFACE].sum()
    val = M.surface_integral_normal_dot(m, field)
    assert abs(val) <= 1e-10 * np.abs(K).max() * area


def test_surface_integral_validates_field():
    m = M.generate_structure_mesh(M.shape("disk", 1.0), 2)
    with pytest.raises(ValidationError):
        M.surface_integral_normal_dot(m, np.zeros((3, 2)))
    bad = np.zeros((m.num_vertices, 2))
    bad[m.interface_vertices()[0]] = np.nan
    with pytest.raises(ValidationError):
        M.surface_integral_normal_dot(m, bad)


def test_shape_validation():
    with pytest.raises(ValidationError):
        M.shape("ball", -1.0)
    with pytest.raises(ValidationError):
        M.shape("dodecahedron", 1.0)
    with pytest.raises(ValidationError):
        M.shape("box", 1.0)
    with pytest.raises(ValidationError):
        M.generate_structure_mesh(M.shape("ball", 1.0), 0)


def test_vertex_cap():
    with pytest.raises(ResourceLimitError):
        M.generate_structure_mesh(M.shape("ball", 1.0), 9, max_vertices=10000)


def test_text_roundtrip_bit_identical(tmp_path):
    s = M.generate_structure_mesh(M.shape("ellipsoid", 1.0, 1.3, 0.8), 2)
    c = M.generate_coupled_mesh(
        M.generate_structure_mesh(M.shape("ball", 1.0), 1), M.shape("ball", 2.0), 1)
    for i, m in enumerate((s, c)):
        p = tmp_path / f"m{i}.txt"
        M.save_text(m, p)
        m2 = M.load_text(p)
        assert m2 == m
        assert np.array_equal(m2.facet_cell, m.facet_cell)
        assert_allclose(m2.facet_normal, m.facet_normal, rtol=0, atol=0)
        assert m2.gen_info == m.gen_info
        # and a second round-trip is byte-stable
        p2 = tmp_path / f"m{i}b.txt"
        M.save_text(m2, p2)
        assert p.read_text() == p2.read_text()


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("not a mesh\n")
    with pytest.raises(ValidationError):
        M.load_text(p)
