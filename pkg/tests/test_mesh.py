import numpy as np
import pytest

from sthdg.mesh import (EdgeTag, FacetRole, MeshError, apply_periodic,
                        build_structured_mesh, extrude_slab, read_mesh_file,
                        write_mesh_file)


def test_2x2_unit_square_counts():
    mesh = build_structured_mesh(2, 2, domain=(0.0, 1.0, 1.0))
    assert mesh.n_vertices == 9
    assert mesh.n_edges == 16
    assert mesh.n_triangles == 8
    assert mesh.n_vertices - mesh.n_edges + mesh.n_triangles == 1


def test_smallest_mesh():
    mesh = build_structured_mesh(1, 1, domain=(0.0, 1.0, 1.0))
    assert (mesh.n_vertices, mesh.n_edges, mesh.n_triangles) == (4, 5, 2)


def test_1152_triangle_mesh():
    mesh = build_structured_mesh(24, 24, domain=(-1.0, 1.0, 1.0))
    assert mesh.n_triangles == 1152
    assert np.isclose(mesh.triangle_areas().sum(), 2.0, rtol=1e-12)


@pytest.mark.parametrize("nx,ny", [(1, 1), (3, 2), (8, 4)])
def test_area_sum_flat_bottom(nx, ny):
    L, R, H = -2.0, 1.0, 1.5
    mesh = build_structured_mesh(nx, ny, domain=(L, R, H))
    assert np.isclose(mesh.triangle_areas().sum(), (R - L) * H, rtol=1e-12)


def test_bottom_profile_shear_area():
    b = lambda x: 0.3 * np.maximum(0.0, 1.0 - np.abs(x))
    mesh = build_structured_mesh(16, 4, domain=(-1, 1, 1), bottom_profile=b,
                                 side_mode="tank")
    # area = full strip minus the integral of b (hat function, mass 0.3)
    assert np.isclose(mesh.triangle_areas().sum(), 2.0 - 0.3, rtol=1e-12)
    mesh.validate(c_r=20.0)


def test_bottom_reaching_surface_rejected():
    with pytest.raises(MeshError, match="free surface"):
        build_structured_mesh(4, 2, domain=(0, 1, 1),
                              bottom_profile=lambda x: np.ones_like(np.asarray(x)))


def test_degenerate_shear_rejected():
    b = lambda x: np.where(np.asarray(x) > 0.5, 0.999999999999, 0.0)
    with pytest.raises(MeshError):
        build_structured_mesh(2, 1, domain=(0, 1, 1), bottom_profile=b)


def test_boundary_tags():
    mesh = build_structured_mesh(2, 2, domain=(0, 1, 1), side_mode="tank")
    tags = [EdgeTag(t) for t in mesh.edge_tags]
    assert tags.count(EdgeTag.FREE_SURFACE) == 2
    assert tags.count(EdgeTag.BOTTOM) == 2
    assert tags.count(EdgeTag.WAVE_MAKER) == 2
    assert tags.count(EdgeTag.WALL) == 2
    assert tags.count(EdgeTag.INTERIOR) == 8


def test_apply_periodic_2x2():
    mesh = apply_periodic(build_structured_mesh(2, 2, domain=(0, 1, 1)))
    assert len(mesh.periodic_pairs) == 2
    assert mesh.n_active_edges == 14
    for le, re in mesh.periodic_pairs:
        assert mesh.periodic_partner(mesh.periodic_partner(le)) == le
        assert np.isclose(mesh.edge_lengths()[le], mesh.edge_lengths()[re])


def test_apply_periodic_no_tags_identity():
    mesh = build_structured_mesh(2, 2, domain=(0, 1, 1), side_mode="tank")
    out = apply_periodic(mesh)
    assert out.periodic_pairs == ()


def test_apply_periodic_mismatch_errors():
    left = build_structured_mesh(2, 2, domain=(0, 1, 1))
    # corrupt one right-wall vertex so x2 spans cannot match
    verts = left.vertices.copy()
    right_edge = np.flatnonzero(left.edge_tags == EdgeTag.PERIODIC_RIGHT)[0]
    va = left.edges[right_edge][0]
    verts[va, 1] -= 0.17
    from dataclasses import replace

    broken = replace(left, vertices=verts)
    with pytest.raises(MeshError, match="unmatched periodic edge"):
        apply_periodic(broken)


def test_extrude_basic_counts():
    mesh = build_structured_mesh(1, 1, domain=(0, 1, 1), side_mode="tank")
    slab = extrude_slab(mesh, 0.0, 0.5, 0)
    assert slab.n_prisms == 2
    assert slab.n_facets == 5
    assert np.allclose(extrude_slab(mesh, 0.0, 2.0).prism_volumes(), 1.0)


def test_extrude_periodic_counts():
    mesh = apply_periodic(build_structured_mesh(2, 2, domain=(0, 1, 1)))
    slab = extrude_slab(mesh, 0.0, 0.25, 0)
    assert slab.n_facets == 14
    assert np.sum(slab.facet_role == FacetRole.FREE_SURFACE) == 2


def test_extrude_unpaired_periodic_rejected():
    mesh = build_structured_mesh(2, 2, domain=(0, 1, 1))
    with pytest.raises(MeshError, match="apply_periodic"):
        extrude_slab(mesh, 0.0, 0.5)


def test_interior_facet_normals_opposite():
    mesh = apply_periodic(build_structured_mesh(3, 2, domain=(-1, 1, 1)))
    slab = extrude_slab(mesh, 0.0, 0.5)
    for f in range(slab.n_facets):
        sides = [(t, le) for t in range(slab.n_prisms) for le in range(3)
                 if slab.tri_facets[t, le] == f]
        if slab.facet_role[f] == FacetRole.INTERIOR and slab.facet_partner[f] < 0:
            (t1, l1), (t2, l2) = sides
            assert np.allclose(slab.tri_normal[t1, l1], -slab.tri_normal[t2, l2])


def test_periodic_facet_has_two_sides_with_consistent_param():
    mesh = apply_periodic(build_structured_mesh(2, 2, domain=(0, 1, 1)))
    slab = extrude_slab(mesh, 0.0, 0.5)
    per = [f for f in range(slab.n_facets) if slab.facet_partner[f] >= 0]
    assert len(per) == 2
    for f in per:
        sides = [(t, le) for t in range(slab.n_prisms) for le in range(3)
                 if slab.tri_facets[t, le] == f]
        assert len(sides) == 2
        # spatial normals of the two sides point out of their own walls
        n1 = slab.tri_normal[sides[0][0], sides[0][1]]
        n2 = slab.tri_normal[sides[1][0], sides[1][1]]
        assert np.allclose(n1, -n2)


def test_shape_regularity_refinement_invariant():
    r1 = build_structured_mesh(3, 3).shape_regularity().max()
    r2 = build_structured_mesh(6, 6).shape_regularity().max()
    r3 = build_structured_mesh(12, 12).shape_regularity().max()
    assert np.isclose(r1, r2, rtol=1e-12) and np.isclose(r2, r3, rtol=1e-12)


def test_mesh_file_roundtrip(tmp_path):
    mesh = build_structured_mesh(3, 2, domain=(-1, 1, 1), side_mode="tank")
    path = tmp_path / "mesh.txt"
    write_mesh_file(mesh, path)
    back = read_mesh_file(path)
    assert np.allclose(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.edge_tags, mesh.edge_tags)


def test_mesh_file_missing_tag_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("v 0 0\nv 1 0\nv 0 1\nt 0 1 2\ne 0 1 Bottom\n")
    with pytest.raises(MeshError, match="no tag"):
        read_mesh_file(path)
