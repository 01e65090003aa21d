"""Layer slicing tests: planning, lattice construction, invariants, exports."""
import numpy as np
import pytest

from latticeplan import shapes
from latticeplan.fields import FieldSet, FrameField, compute_fields
from latticeplan.slicing import (BOUNDARY, CROSS, EDGE_BOUNDARY, EDGE_U, EDGE_V,
                                 U_ISO, V_ISO, IsoPlan, SlicingError,
                                 boundary_loops, boundary_vertex,
                                 build_layer_graph, flag_overhangs,
                                 isoline_vertex, overhang_angles, plan_isovalues,
                                 read_layer_file, slice_layers,
                                 validate_layer_graph, write_layer_file,
                                 write_layers_obj)
from latticeplan.tetmesh import TetMesh, extract_boundary, select_base


def _dummy_fields(dist, u, v):
    z = np.zeros((0, 3))
    return FieldSet(np.asarray(dist, float), np.asarray(u, float),
                    np.asarray(v, float), FrameField(z, z.copy(), z.copy()), 1.0)


def _analytic_fields(mesh: TetMesh, dist, u, v, nozzle=(0.0, 0.0, 1.0)):
    """FieldSet with hand-chosen per-vertex values and a constant nozzle."""
    n = np.tile(np.asarray(nozzle, float), (mesh.n_tets, 1))
    udir = np.tile([1.0, 0.0, 0.0], (mesh.n_tets, 1))
    vdir = np.cross(udir, n)
    return FieldSet(np.asarray(dist, float), np.asarray(u, float),
                    np.asarray(v, float), FrameField(n, udir, vdir), 1.0)


@pytest.fixture(scope="module")
def col_fields(small_column):
    return compute_fields(small_column, select_base(small_column))


@pytest.fixture(scope="module")
def box_fields(box_column):
    return compute_fields(box_column, select_base(box_column))


@pytest.fixture(scope="module")
def y_fields(y_part):
    return compute_fields(y_part, select_base(y_part))


# ---------------------------------------------------------------------------
# Iso-value planning


def test_plan_regular_ladder_below_max():
    fs = _dummy_fields(np.linspace(0, 44.29, 1000), np.linspace(0, 24.17, 1000),
                       np.linspace(0, 24.17, 1000))
    plan = plan_isovalues(fs, slice_step=1.0, u_step=2.0, v_step=2.0)
    assert plan.n_layers == 44
    assert np.allclose(plan.slice_values, np.arange(1, 45), atol=1e-5)
    assert np.allclose(plan.u_values, np.arange(2, 25, 2), atol=1e-5)
    assert plan.slice_values[-1] < 44.29
    assert np.all(np.diff(plan.slice_values) > 0)
    assert np.allclose(plan.slice_intervals, 1.0, atol=1e-5)


def test_plan_interval_exceeding_range_is_an_error():
    fs = _dummy_fields([0.0, 3.0], [0.0, 3.0], [0.0, 3.0])
    with pytest.raises(SlicingError, match="empty plan"):
        plan_isovalues(fs, slice_step=5.0, u_step=1.0, v_step=1.0)
    with pytest.raises(SlicingError):
        plan_isovalues(fs, slice_step=1.0, u_step=5.0, v_step=1.0)


def test_plan_perturbs_off_vertex_value_collisions():
    fs = _dummy_fields([0.0, 1.0, 2.0, 3.5], [0.0, 3.5], [0.0, 3.5])
    plan = plan_isovalues(fs, slice_step=1.0, u_step=1.0, v_step=1.0)
    assert plan.n_layers == 3
    assert plan.slice_values[0] != 1.0 and abs(plan.slice_values[0] - 1.0) < 1e-4
    assert plan.slice_values[1] != 2.0 and abs(plan.slice_values[1] - 2.0) < 1e-4
    assert plan.slice_values[2] == 3.0          # no collision, kept exact
    assert np.all(np.diff(plan.slice_values) > 0)


def test_plan_explicit_nonuniform_lists():
    fs = _dummy_fields(np.linspace(0, 10, 57), np.linspace(0, 10, 57),
                       np.linspace(0, 10, 57))
    plan = plan_isovalues(fs, slice_values=[1.0, 2.5, 7.0],
                          u_values=[3.3], v_values=[0.9, 9.1])
    assert np.allclose(plan.slice_values, [1.0, 2.5, 7.0], atol=1e-5)
    assert len(plan.u_values) == 1 and len(plan.v_values) == 2
    with pytest.raises(SlicingError):
        plan_isovalues(fs, slice_values=[2.0, 1.0], u_values=[1], v_values=[1])
    with pytest.raises(SlicingError):
        plan_isovalues(fs, slice_values=[5.0, 11.0], u_values=[1], v_values=[1])


# ---------------------------------------------------------------------------
# Scalar construction primitives


def test_isoline_vertex_midpoint_example():
    tri = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    res = isoline_vertex(tri, (0.0, 2.0, 2.0), (0.0, 0.0, 4.0), 1.0, 1.0)
    assert res is not None
    pos, bary = res
    assert np.allclose(pos, [0.25, 0.25, 0.0], atol=1e-12)
    assert np.allclose(bary, [0.5, 0.25, 0.25], atol=1e-12)


def test_isoline_vertex_absent_cases():
    tri = np.eye(3)
    # all slice values on one side
    assert isoline_vertex(tri, (2.0, 3.0, 4.0), (0.0, 1.0, 2.0), 1.0, 0.5) is None
    # transverse iso outside the segment's value range
    assert isoline_vertex(tri, (0.0, 2.0, 2.0), (0.0, 0.0, 4.0), 1.0, 3.0) is None


def test_isoline_vertex_against_bisection_oracle(rng):
    for _ in range(50):
        tri = rng.normal(size=(3, 3))
        g = rng.normal(size=3)
        f = rng.normal(size=3)
        giso = rng.uniform(min(g), max(g))
        fiso = rng.normal()
        res = isoline_vertex(tri, g, f, giso, fiso)
        above = g > giso
        if above.all() or (~above).all():
            assert res is None
            continue
        lone = int(np.argmax(above)) if above.sum() == 1 else int(np.argmax(~above))
        o1, o2 = (lone + 1) % 3, (lone + 2) % 3
        tp = (giso - g[lone]) / (g[o1] - g[lone])
        tq = (giso - g[lone]) / (g[o2] - g[lone])
        P = tri[lone] + tp * (tri[o1] - tri[lone])
        Q = tri[lone] + tq * (tri[o2] - tri[lone])
        fp = f[lone] + tp * (f[o1] - f[lone])
        fq = f[lone] + tq * (f[o2] - f[lone])
        if not (fp - fiso) * (fq - fiso) < 0:
            assert res is None
            continue
        # bisection along the P-Q slice contour (independent of the lerp form)
        lo, hi = 0.0, 1.0
        flo = fp - fiso
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = fp + mid * (fq - fp) - fiso
            if (fm > 0) == (flo > 0):
                lo, flo = mid, fm
            else:
                hi = mid
        expect = P + 0.5 * (lo + hi) * (Q - P)
        assert res is not None
        assert np.linalg.norm(res[0] - expect) <= 1e-6


def test_boundary_vertex_examples(rng):
    p0, p1 = np.zeros(3), np.array([2.0, 0.0, 0.0])
    pos, t = boundary_vertex(p0, p1, 0.0, 2.0, 1.0)
    assert np.allclose(pos, [1.0, 0.0, 0.0]) and t == pytest.approx(0.5)
    assert boundary_vertex(p0, p1, 2.0, 3.0, 1.0) is None
    for _ in range(20):
        a, b = rng.normal(size=(2, 3))
        g0, g1 = sorted(rng.normal(size=2))
        if g1 - g0 < 1e-6:
            continue
        iso = rng.uniform(g0 + 1e-9, g1 - 1e-9)
        res = boundary_vertex(a, b, g0, g1, iso)
        assert res is not None
        tt = (iso - g0) / (g1 - g0)
        assert np.linalg.norm(res[0] - (a + tt * (b - a))) <= 1e-9


# ---------------------------------------------------------------------------
# Single-tet layer with exact expected lattice


def test_single_tet_layer_exact_structure():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    mesh = TetMesh.build(verts, np.array([[0, 1, 2, 3]]))
    fs = _analytic_fields(mesh, dist=verts[:, 2], u=verts[:, 0], v=verts[:, 1])
    g = build_layer_graph(mesh, fs, 0.5, np.array([0.2]), np.array([0.2]))
    validate_layer_graph(mesh, g)
    assert g.n_vertices == 8 and g.n_edges == 11
    kinds = {k: int((g.kinds == k).sum()) for k in (U_ISO, V_ISO, CROSS, BOUNDARY)}
    assert kinds == {U_ISO: 2, V_ISO: 2, CROSS: 1, BOUNDARY: 3}
    cross = g.positions[g.kinds == CROSS][0]
    assert np.allclose(cross, [0.2, 0.2, 0.5], atol=1e-12)
    deg = g.degrees()
    assert sorted(deg[g.kinds == U_ISO].tolist()) == [3, 3]
    assert deg[g.kinds == CROSS][0] == 4
    assert np.all(deg[g.kinds == BOUNDARY] == 2)
    ek = {k: int((g.edge_kinds == k).sum()) for k in (EDGE_U, EDGE_V, EDGE_BOUNDARY)}
    assert ek == {EDGE_U: 2, EDGE_V: 2, EDGE_BOUNDARY: 7}
    # crossing's field values are exactly the transverse iso-values
    assert g.field_u[g.kinds == CROSS][0] == pytest.approx(0.2, abs=1e-12)
    assert g.field_v[g.kinds == CROSS][0] == pytest.approx(0.2, abs=1e-12)
    assert len(boundary_loops(g)) == 1


def test_single_tet_iso_above_max_is_empty():
    mesh = shapes.single_tet()
    fs = _analytic_fields(mesh, mesh.vertices[:, 2], mesh.vertices[:, 0],
                          mesh.vertices[:, 1])
    g = build_layer_graph(mesh, fs, 99.0, np.array([0.2]), np.array([0.2]))
    assert g.n_vertices == 0 and g.n_edges == 0


# ---------------------------------------------------------------------------
# Column layers


def test_box_column_midlayer_grid_count(box_column, box_fields):
    plan = plan_isovalues(box_fields, slice_values=[30.0],
                          u_values=[5.0, 10.0, 15.0], v_values=[5.0, 10.0, 15.0])
    g = build_layer_graph(box_column, box_fields, plan.slice_values[0],
                          plan.u_values, plan.v_values)
    validate_layer_graph(box_column, g)
    assert int((g.kinds == CROSS).sum()) == 9           # 3 x 3 interior lattice
    loops = boundary_loops(g)
    assert len(loops) == 1
    per = g.edge_lengths()[g.edge_kinds == EDGE_BOUNDARY].sum()
    assert per == pytest.approx(80.0, rel=0.01)


def test_column_interval_tenth_gives_ten_layers(small_column, col_fields):
    plan = plan_isovalues(col_fields, slice_step=3.0, u_step=2.0, v_step=2.0)
    graphs = slice_layers(small_column, col_fields, plan)
    assert len(graphs) == 10
    for g in graphs:
        validate_layer_graph(small_column, g)
        assert len(boundary_loops(g)) == 1
        assert np.abs(g.field_dist - g.iso).max() <= 1e-6


def test_slice_layers_threaded_matches_serial(small_column, col_fields):
    plan = plan_isovalues(col_fields, slice_step=6.0, u_step=3.0, v_step=3.0)
    a = slice_layers(small_column, col_fields, plan, threads=1)
    b = slice_layers(small_column, col_fields, plan, threads=4)
    assert len(a) == len(b)
    for ga, gb in zip(a, b):
        assert np.array_equal(ga.positions, gb.positions)
        assert np.array_equal(ga.edges, gb.edges)


def test_empty_layers_are_dropped(small_column, col_fields, caplog):
    plan = IsoPlan(np.array([15.0, 40.0]), np.array([3.0, 6.0]),
                   np.array([3.0, 6.0]))
    import logging
    with caplog.at_level(logging.INFO, logger="latticeplan.slicing"):
        graphs = slice_layers(small_column, col_fields, plan)
    assert len(graphs) == 1 and graphs[0].layer == 0
    assert any("empty layer" in r.message for r in caplog.records)


def test_degree_three_parity_per_loop(small_column, col_fields):
    plan = plan_isovalues(col_fields, slice_step=3.0, u_step=2.0, v_step=2.0)
    for g in slice_layers(small_column, col_fields, plan):
        deg = g.degrees()
        for loop in boundary_loops(g):
            assert int((deg[loop] == 3).sum()) % 2 == 0


# ---------------------------------------------------------------------------
# Closed layers (no boundary) and multi-loop layers


def test_sphere_interior_layers_have_closed_isolines(sphere_part):
    mesh = sphere_part
    base = select_base(mesh, vertices=np.where(mesh.boundary_vertex_mask)[0])
    fs = compute_fields(mesh, base)
    plan = plan_isovalues(fs, slice_step=fs.dist.max() / 4,
                          u_step=fs.u.max() / 4, v_step=fs.v.max() / 4)
    graphs = slice_layers(mesh, fs, plan)
    assert graphs
    closed = 0
    for g in graphs:
        validate_layer_graph(mesh, g)
        if g.n_vertices and not g.on_boundary.any():
            closed += 1
            assert int((g.kinds == BOUNDARY).sum()) == 0
            assert set(np.unique(g.degrees())) <= {2, 4}
    assert closed >= 1


def test_branching_part_layers_split_into_two_loops(y_part, y_fields):
    plan = plan_isovalues(y_fields, slice_step=2.0, u_step=2.0, v_step=2.0)
    graphs = slice_layers(y_part, y_fields, plan, threads=4)
    assert len(graphs) >= 20
    loop_counts = []
    for g in graphs:
        validate_layer_graph(y_part, g)
        loop_counts.append(len(boundary_loops(g)))
    assert max(loop_counts) >= 2        # separate branch cross-sections
    assert loop_counts[0] == 1          # single trunk at the bottom


def test_torus_layer_validates(torus_part):
    fs = compute_fields(torus_part, select_base(torus_part))
    plan = plan_isovalues(fs, slice_step=fs.dist.max() / 6,
                          u_step=fs.u.max() / 5, v_step=fs.v.max() / 5)
    graphs = slice_layers(torus_part, fs, plan)
    assert graphs
    for g in graphs:
        validate_layer_graph(torus_part, g)


# ---------------------------------------------------------------------------
# Overhang diagnostics


def test_overhang_angles_column(small_column, col_fields):
    surf = extract_boundary(small_column)
    ang = overhang_angles(surf, col_fields.frames.nozzle)
    side = np.abs(surf.normals[:, 2]) < 1e-9
    top = surf.normals[:, 2] > 0.999
    bottom = surf.normals[:, 2] < -0.999
    assert np.allclose(ang[side], 90.0, atol=2.0)
    assert np.all(ang[top] < 10.0)
    assert np.all(ang[bottom] > 170.0)
    flags = flag_overhangs(ang, threshold=135.0)
    assert flags[bottom].all() and not flags[top].any() and not flags[side].any()


def test_overhang_fixed_direction_broadcast(small_column):
    surf = extract_boundary(small_column)
    ang = overhang_angles(surf, np.array([0.0, 0.0, 1.0]))
    top = surf.normals[:, 2] > 0.999
    assert np.allclose(ang[top], 0.0, atol=1e-9)


# ---------------------------------------------------------------------------
# Serialization


def test_layer_file_round_trip(small_column, col_fields, tmp_path):
    plan = plan_isovalues(col_fields, slice_step=6.0, u_step=3.0, v_step=3.0)
    graphs = slice_layers(small_column, col_fields, plan)
    p = tmp_path / "layers.txt"
    write_layer_file(p, graphs)
    back = read_layer_file(p)
    assert len(back) == len(graphs)
    for a, b in zip(graphs, back):
        assert a.layer == b.layer and a.iso == b.iso
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.kinds, b.kinds)
        assert np.array_equal(a.on_boundary, b.on_boundary)
        assert np.array_equal(a.host_kinds, b.host_kinds)
        assert np.array_equal(a.host_ids, b.host_ids)
        assert np.array_equal(a.normals, b.normals)
        assert np.array_equal(a.field_dist, b.field_dist)
        assert np.array_equal(a.field_u, b.field_u)
        assert np.array_equal(a.field_v, b.field_v)
        assert np.array_equal(a.edges, b.edges)
        assert np.array_equal(a.edge_kinds, b.edge_kinds)
        assert np.array_equal(a.edge_isos, b.edge_isos)
        assert np.array_equal(a.edge_hosts, b.edge_hosts)


def test_layers_obj_export(small_column, col_fields, tmp_path):
    plan = plan_isovalues(col_fields, slice_step=10.0, u_step=4.0, v_step=4.0)
    graphs = slice_layers(small_column, col_fields, plan)
    p = tmp_path / "layers.obj"
    write_layers_obj(p, graphs)
    lines = p.read_text().splitlines()
    nv = sum(1 for l in lines if l.startswith("v "))
    nl = sum(1 for l in lines if l.startswith("l "))
    no = sum(1 for l in lines if l.startswith("o "))
    assert nv == sum(g.n_vertices for g in graphs)
    assert nl == sum(g.n_edges for g in graphs)
    assert no == len(graphs)
    # line indices stay within the vertex count (1-based)
    for l in lines:
        if l.startswith("l "):
            a, b = map(int, l.split()[1:])
            assert 1 <= a <= nv and 1 <= b <= nv
