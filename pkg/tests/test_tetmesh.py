"""Mesh container, validation, adjacency, base selection, and file I/O."""
import numpy as np
import pytest

from latticeplan import shapes
from latticeplan.tetmesh import (
    MeshParseError, MeshValidationError, TetMesh, enclosed_volume,
    extract_boundary, load_mesh, mesh_stats, save_mesh, select_base,
    tet_signed_volumes)


def test_single_tet_counts():
    mesh = shapes.single_tet()
    assert mesh.n_vertices == 4
    assert mesh.n_tets == 1
    assert mesh.n_faces == 4
    assert mesh.n_edges == 6
    assert mesh.boundary_face_mask.all()
    assert mesh.boundary_edge_mask.all()
    assert mesh.boundary_vertex_mask.all()


def test_positive_orientation_enforced():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    mesh = TetMesh.build(verts, np.array([[1, 0, 2, 3]]))  # negative orientation
    assert (mesh.tet_volumes > 0).all()
    assert tet_signed_volumes(mesh.vertices, mesh.tets)[0] > 0


def test_out_of_range_vertex_index_rejected():
    verts = np.zeros((4, 3))
    verts[1, 0] = verts[2, 1] = verts[3, 2] = 1.0
    with pytest.raises(MeshValidationError, match="tet 0"):
        TetMesh.build(verts, np.array([[0, 1, 2, 7]]))


def test_degenerate_tet_rejected():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0.0]])
    with pytest.raises(MeshValidationError, match="degenerate"):
        TetMesh.build(verts, np.array([[0, 1, 2, 3]]))


def test_repeated_vertex_rejected():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(MeshValidationError, match="repeats"):
        TetMesh.build(verts, np.array([[0, 1, 2, 2]]))


def test_edge_pinch_rejected():
    """Two tets sharing exactly one edge: non-manifold boundary edge."""
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [0, -1, 0], [0, 0, -1]])
    with pytest.raises(MeshValidationError, match="boundary"):
        TetMesh.build(verts, np.array([[0, 1, 2, 3], [0, 1, 4, 5]]))


def test_vertex_pinch_rejected():
    """Two tets sharing exactly one vertex: non-manifold boundary vertex."""
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                      [-1, 0, 0], [0, -1, 0], [0, 0, -1]])
    with pytest.raises(MeshValidationError, match="non-manifold"):
        TetMesh.build(verts, np.array([[0, 1, 2, 3], [0, 4, 6, 5]]))


def test_interior_face_shared_by_two_tets(small_column):
    counts = (small_column.face_tets >= 0).sum(axis=1)
    interior = ~small_column.boundary_face_mask
    assert (counts[interior] == 2).all()
    assert (counts[small_column.boundary_face_mask] == 1).all()


def test_unit_cube_boundary():
    mesh = shapes.solid_column(1, 1, 1, 1.0)   # one cell, six tets
    surf = extract_boundary(mesh)
    assert surf.n_tris == 12
    total = surf.areas.sum()
    assert abs(total - 6.0) < 1e-9


def test_outward_normals():
    mesh = shapes.single_tet()
    surf = extract_boundary(mesh)
    centroid = mesh.vertices.mean(axis=0)
    for t in range(surf.n_tris):
        face_c = mesh.vertices[surf.tris[t]].mean(axis=0)
        assert surf.normals[t] @ (face_c - centroid) > 0


def test_surface_neighbors_closed(sphere_part):
    surf = extract_boundary(sphere_part)
    assert (surf.neighbors >= 0).all()   # closed surface: every edge matched
    # Neighbor relation is symmetric.
    for t in range(0, surf.n_tris, 97):
        for nb in surf.neighbors[t]:
            assert t in surf.neighbors[nb]


def test_torus_boundary_euler_characteristic(torus_part):
    surf = extract_boundary(torus_part)
    nv = len(surf.vertex_ids())
    nf = surf.n_tris
    edges = np.sort(np.concatenate([surf.tris[:, [0, 1]], surf.tris[:, [1, 2]],
                                    surf.tris[:, [2, 0]]]), axis=1)
    ne = len(np.unique(edges, axis=0))
    assert nv - ne + nf == 0    # genus 1


def test_sphere_boundary_euler_characteristic(sphere_part):
    surf = extract_boundary(sphere_part)
    nv = len(surf.vertex_ids())
    edges = np.sort(np.concatenate([surf.tris[:, [0, 1]], surf.tris[:, [1, 2]],
                                    surf.tris[:, [2, 0]]]), axis=1)
    ne = len(np.unique(edges, axis=0))
    assert nv - ne + surf.n_tris == 2


def test_volume_matches_divergence_theorem(y_part):
    surf = extract_boundary(y_part)
    assert abs(enclosed_volume(y_part, surf) - y_part.tet_volumes.sum()) \
        <= 1e-6 * y_part.tet_volumes.sum()


def test_select_base_threshold(small_column):
    base = select_base(small_column, eps=0.01)
    zs = small_column.vertices[base.vertex_ids, 2]
    assert (zs == 0).all()
    direct = np.where(small_column.boundary_vertex_mask
                      & (small_column.vertices[:, 2] <= 0.01))[0]
    assert np.array_equal(np.sort(base.vertex_ids), direct)


def test_select_base_default_eps(y_part):
    base = select_base(y_part)
    lo, hi = y_part.bbox()
    eps = 1e-3 * (hi[2] - lo[2])
    direct = np.where(y_part.boundary_vertex_mask
                      & (y_part.vertices[:, 2] <= lo[2] + eps))[0]
    assert np.array_equal(np.sort(base.vertex_ids), direct)
    assert len(base) > 0


def test_select_base_rejects_interior_vertex(small_column):
    interior = np.where(~small_column.boundary_vertex_mask)[0]
    assert len(interior)
    with pytest.raises(MeshValidationError, match="not on the mesh boundary"):
        select_base(small_column, vertices=[int(interior[0])])


def test_select_base_explicit(small_column):
    ids = np.where(small_column.boundary_vertex_mask)[0][:10]
    base = select_base(small_column, vertices=ids)
    assert np.array_equal(base.vertex_ids, np.sort(ids))


def test_mesh_stats_consistent(small_column):
    st = mesh_stats(small_column)
    assert st["vertices"] == small_column.n_vertices
    assert st["tets"] == small_column.n_tets
    assert st["volume"] == pytest.approx(3000.0)
    assert st["boundary_faces"] == int(small_column.boundary_face_mask.sum())


def test_incidence_lists(small_column):
    v = int(small_column.tets[0, 0])
    tets = small_column.incident_tets(v)
    assert 0 in tets
    assert all(v in small_column.tets[t] for t in tets)
    e = 0
    for t in small_column.edge_incident_tets(e):
        tet = set(small_column.tets[t])
        assert set(small_column.edges[e]) <= tet


@pytest.mark.parametrize("fmt,suffix", [("tetgen", ".node"), ("medit", ".mesh")])
def test_roundtrip_bit_exact(tmp_path, small_column, fmt, suffix):
    path = tmp_path / f"part{suffix}"
    save_mesh(small_column, path, fmt)
    back = load_mesh(path)
    assert np.array_equal(back.vertices, small_column.vertices)
    assert np.array_equal(back.tets, small_column.tets)


def test_roundtrip_irrational_coordinates(tmp_path):
    mesh = shapes.single_tet()    # sqrt(3)/2 etc.
    for suffix in (".node", ".mesh"):
        save_mesh(mesh, tmp_path / f"t{suffix}")
        back = load_mesh(tmp_path / f"t{suffix}")
        assert np.array_equal(back.vertices, mesh.vertices)


def test_tetgen_one_based_indexing(tmp_path):
    (tmp_path / "p.node").write_text(
        "4 3 0 0\n1 0.0 0.0 0.0\n2 1.0 0.0 0.0\n3 0.0 1.0 0.0\n4 0.0 0.0 1.0\n")
    (tmp_path / "p.ele").write_text("1 4 0\n1 1 2 3 4\n")
    mesh = load_mesh(tmp_path / "p.node")
    assert mesh.n_tets == 1
    assert set(mesh.tets[0]) == {0, 1, 2, 3}


def test_missing_file_raises_parse_error(tmp_path):
    with pytest.raises(MeshParseError, match="missing"):
        load_mesh(tmp_path / "nope.node")
    with pytest.raises(MeshParseError):
        load_mesh(tmp_path / "nope.mesh")


def test_malformed_tetgen(tmp_path):
    (tmp_path / "bad.node").write_text("2 3 0 0\n0 0.0 0.0\n")
    (tmp_path / "bad.ele").write_text("0 4 0\n")
    with pytest.raises(MeshParseError):
        load_mesh(tmp_path / "bad.node")


def test_unknown_extension(tmp_path):
    with pytest.raises(MeshParseError, match="infer"):
        load_mesh(tmp_path / "part.stl")
