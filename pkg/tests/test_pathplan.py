"""Continuous extrusion paths: trimming, tours, thickness, feed, air moves."""

import json
import math
from collections import Counter

import numpy as np
import pytest

from _synth import (disc_sub, figure_eight_sub, grid_sub, loop_with_chord_sub,
                    square_sub, wrap_subgraph)
from latticeplan.fields import compute_fields
from latticeplan.pathplan import (PathPlanError, SafeBox, euler_tour,
                                  filament_feed, layer_thickness, plan_part,
                                  read_toolpath, safe_box_airmove,
                                  support_perimeter, trim_to_eulerian,
                                  write_toolpath, write_toolpath_csv,
                                  write_toolpath_obj)
from latticeplan.sequencing import lpt
from latticeplan.skeleton import build_skeleton_tree
from latticeplan.slicing import (EDGE_BOUNDARY, HOST_TET, plan_isovalues,
                                 slice_layers)
from latticeplan.tetmesh import select_base


# ---------------------------------------------------------------------------
# Filament feed (volume conservation)


def test_filament_feed_unit_cancellation():
    assert abs(filament_feed(1.0, math.pi, 1.0, 1.0, 1.0) - 1.0) < 1e-15


def test_filament_feed_linear_in_h():
    a = filament_feed(0.3, 0.8, 10.0, 0.95, 0.875)
    b = filament_feed(0.6, 0.8, 10.0, 0.95, 0.875)
    assert abs(b - 2.0 * a) < 1e-12


def test_filament_feed_reference_value():
    fm = filament_feed(0.6, 0.8, 10.0, 0.95, 0.875)
    assert abs(fm - 1.896) < 1e-3
    # exact conservation identity
    assert abs(math.pi * 0.875 ** 2 * fm - 0.95 * 0.8 * 0.6 * 10.0) < 1e-12


def test_filament_feed_rejects_bad_parameters():
    for args in [(-0.1, 0.8, 10.0, 0.95, 0.875),
                 (0.6, 0.0, 10.0, 0.95, 0.875),
                 (0.6, 0.8, 10.0, 1.5, 0.875),
                 (0.6, 0.8, 10.0, 0.95, 0.0)]:
        with pytest.raises(PathPlanError):
            filament_feed(*args)


# ---------------------------------------------------------------------------
# Trimming to even degrees


def _degree_counter(edges):
    deg = Counter()
    for a, b in edges:
        deg[int(a)] += 1
        deg[int(b)] += 1
    return deg


def test_trim_plain_loop_removes_nothing():
    sub = square_sub(20.0, 0.0)
    t = trim_to_eulerian(sub)
    assert len(t.removed_edges) == 0 and not t.removed_spans
    assert len(t.edges) == sub.n_edges


def test_trim_grid_makes_degrees_even():
    sub = grid_sub(20.0, n_u=3, n_v=3)
    t = trim_to_eulerian(sub)
    deg = _degree_counter(t.edges)
    assert set(deg.values()) <= {2, 4}
    assert len(t.removed_spans) == 6        # 12 degree-3 feet, paired up
    # removed edges are boundary edges only
    bnd = {frozenset(map(int, e)) for e, k in
           zip(sub.graph.edges[sub.edge_ids],
               sub.graph.edge_kinds[sub.edge_ids]) if k == EDGE_BOUNDARY}
    for e in t.removed_edges:
        assert frozenset(map(int, e)) in bnd
    # every former degree-3 foot lost exactly one boundary edge
    full = _degree_counter(sub.graph.edges[sub.edge_ids])
    for v, d in full.items():
        if d == 3:
            assert deg[v] == 2


def test_trim_alternates_spans_around_loop():
    sub = loop_with_chord_sub(10.0, n=32)
    t = trim_to_eulerian(sub)
    assert len(t.removed_spans) == 1
    span = t.removed_spans[0]
    # the span runs between the two chord feet over half the circle
    assert {int(span[0]), int(span[-1])} == {0, 16}
    assert len(span) == 17
    deg = _degree_counter(t.edges)
    assert set(deg.values()) <= {2, 4}


def test_trim_odd_degree3_count_raises():
    n = 8
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    pos = np.column_stack([np.cos(th), np.sin(th), np.zeros(n)])
    pos = np.vstack([pos, [[0.0, 0.0, 0.0]]])
    nrm = np.tile([0.0, 0.0, 1.0], (n + 1, 1))
    edges = [(i, (i + 1) % n) for i in range(n)] + [(0, n)]
    ekinds = [EDGE_BOUNDARY] * n + [2]
    sub = wrap_subgraph(pos, nrm, np.asarray(edges), 0.0, 0, 0,
                        loops=[np.arange(n)], edge_kinds=ekinds)
    with pytest.raises(PathPlanError):
        trim_to_eulerian(sub)


# ---------------------------------------------------------------------------
# Euler tours


def _edge_multiset(walks):
    ms = Counter()
    for walk in walks:
        for a, b in zip(walk, walk[1:]):
            ms[frozenset((int(a), int(b)))] += 1
    return ms


def _assert_turns(walks, trimmed):
    kind_of = {}
    for e, k in zip(trimmed.edges, trimmed.edge_kinds):
        kind_of[frozenset(map(int, e))] = int(k)
    deg = _degree_counter(trimmed.edges)
    for walk in walks:
        for i in range(1, len(walk) - 1):
            v = int(walk[i])
            if deg[v] == 4:
                k_in = kind_of[frozenset((int(walk[i - 1]), v))]
                k_out = kind_of[frozenset((v, int(walk[i + 1])))]
                assert k_in != k_out, f"straight-through at crossing {v}"


def test_euler_single_cycle():
    sub = square_sub(12.0, 0.0, per_edge=4)
    t = trim_to_eulerian(sub)
    walks = euler_tour(t)
    assert len(walks) == 1
    assert walks[0][0] == walks[0][-1]
    assert _edge_multiset(walks) == Counter(
        {frozenset(map(int, e)): 1 for e in t.edges})


def test_euler_figure_eight_turns_at_shared_vertex():
    sub = figure_eight_sub()
    t = trim_to_eulerian(sub)
    walks = euler_tour(t)
    assert len(walks) == 1
    assert len(walks[0]) == 9              # 8 edges + closing vertex
    _assert_turns(walks, t)


def test_euler_grid_covers_every_edge_once():
    sub = grid_sub(20.0, n_u=4, n_v=4)
    t = trim_to_eulerian(sub)
    walks = euler_tour(t)
    assert _edge_multiset(walks) == Counter(
        {frozenset(map(int, e)): 1 for e in t.edges})
    for walk in walks:
        assert walk[0] == walk[-1]
    _assert_turns(walks, t)


def test_euler_rejects_odd_degrees():
    sub = loop_with_chord_sub(10.0)
    t = trim_to_eulerian(sub)
    bad = type(t)(sub=t.sub, edges=t.edges[:-1], edge_kinds=t.edge_kinds[:-1],
                  removed_edges=t.removed_edges, removed_spans=t.removed_spans)
    with pytest.raises(PathPlanError):
        euler_tour(bad)


# ---------------------------------------------------------------------------
# Support perimeter


def test_perimeter_square_inward_offset_length():
    w = 0.8
    sub = square_sub(20.0, 0.0, per_edge=8)
    t = trim_to_eulerian(sub)
    loops = support_perimeter(sub, t, w)
    assert len(loops) == 1 and loops[0].n_teeth == 0
    assert abs(loops[0].length - 4 * (20.0 - 2 * w)) < 1e-6
    # perimeter stays strictly inside the boundary square
    assert np.abs(loops[0].positions[:, :2]).max() <= 10.0 - w + 1e-9


def test_perimeter_tooth_count_over_removed_span():
    w = 0.8
    sub = loop_with_chord_sub(10.0, n=32)
    t = trim_to_eulerian(sub)
    span = t.removed_spans[0]
    pos = sub.graph.positions
    s = float(np.linalg.norm(np.diff(pos[span], axis=0), axis=1).sum())
    expect = math.ceil(s / (2 * (2 * w)))
    loops = support_perimeter(sub, t, w)
    assert sum(lp.n_teeth for lp in loops) == expect


def test_perimeter_smooth_circle_radius():
    w = 0.8
    sub = disc_sub(10.0, 0.0, lattice=False)
    t = trim_to_eulerian(sub)
    loops = support_perimeter(sub, t, w)
    r = np.linalg.norm(loops[0].positions[:, :2], axis=1)
    assert np.allclose(r, r.mean(), atol=1e-3)
    assert abs(r.mean() - (10.0 - w / math.cos(math.pi / 64))) < 1e-3


# ---------------------------------------------------------------------------
# Layer thickness


def test_thickness_parallel_discs():
    prev = disc_sub(10.0, 0.0)
    cur = disc_sub(10.0, 1.0, layer=1)
    h = layer_thickness(cur, prev, 1.5, 1.0)
    assert np.allclose(h, 1.0, atol=1e-12)


def test_thickness_clamped_at_lambda_phi():
    prev = disc_sub(10.0, 0.0)
    cur = disc_sub(10.0, 3.0, layer=1)
    h = layer_thickness(cur, prev, 1.5, 1.0)
    assert np.allclose(h, 1.5, atol=1e-12)


def test_thickness_first_layer_uses_height():
    cur = disc_sub(10.0, 0.6)
    h = layer_thickness(cur, None, 1.5, 0.6)
    assert np.allclose(h, 0.6, atol=1e-12)


def test_thickness_matches_brute_force(rng):
    a = rng.uniform(-10, 10, (40, 3))
    b = a + rng.uniform(-3, 3, (40, 3))
    seg_pos = np.empty((80, 3))
    seg_pos[0::2], seg_pos[1::2] = a, b
    edges = np.column_stack([np.arange(0, 80, 2), np.arange(1, 80, 2)])
    nrm = np.tile([0.0, 0.0, 1.0], (80, 1))
    prev = wrap_subgraph(seg_pos, nrm, edges, 0.0, 0, 0, loops=[])
    pts = rng.uniform(-12, 12, (60, 3))
    chain = np.column_stack([np.arange(59), np.arange(1, 60)])
    cur = wrap_subgraph(pts, np.tile([0.0, 0.0, 1.0], (60, 1)), chain,
                        5.0, 1, 0, loops=[])
    h = layer_thickness(cur, prev, 1e9, 1.0)
    for i, p in enumerate(pts):
        d = b - a
        t = np.clip(np.einsum("ij,ij->i", p - a, d) /
                    np.einsum("ij,ij->i", d, d), 0.0, 1.0)
        brute = np.linalg.norm(a + t[:, None] * d - p, axis=1).min()
        assert abs(h[i] - brute) < 1e-9


def test_thickness_multiple_lower_subs():
    left = disc_sub(4.0, 0.0, cx=-5.0)
    right = disc_sub(4.0, 0.0, cx=5.0, index=1)
    cur = disc_sub(4.0, 1.0, cx=-5.0, layer=1)
    both = layer_thickness(cur, [left, right], 1.5, 1.0)
    assert np.allclose(both, 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# Safe-box air moves


def _box(points, margin=5.0):
    return SafeBox.around(np.asarray(points, dtype=float), margin)


def test_airmove_zero_when_stationary():
    box = _box([[0, 0, 0], [10, 10, 10]])
    p = np.array([5.0, 5.0, 10.0])
    up = np.array([0.0, 0.0, 1.0])
    poly, length = safe_box_airmove(p, up, p, up, box)
    assert length == 0.0 and len(poly) == 1


def test_airmove_same_layer_bound():
    pts = [[x, y, z] for x in (0, 10) for y in (0, 10) for z in (0, 10)]
    box = _box(pts, margin=5.0)
    up = np.array([0.0, 0.0, 1.0])
    a = np.array([0.0, 5.0, 10.0])
    b = np.array([10.0, 5.0, 10.0])
    poly, length = safe_box_airmove(a, up, b, up, box)
    assert length <= 10.0 + 2 * 5.0 + 1e-9
    assert length >= 10.0
    assert np.allclose(poly[0], a) and np.allclose(poly[-1], b)


def test_airmove_travel_stays_out_of_the_box_interior():
    pts = [[x, y, z] for x in (0, 20) for y in (0, 20) for z in (0, 20)]
    box = _box(pts, margin=4.0)
    a = np.array([1.0, 10.0, 18.0])
    b = np.array([19.0, 10.0, 18.0])
    oa = np.array([-1.0, 0.0, 0.2])
    ob = np.array([1.0, 0.0, 0.2])
    oa, ob = oa / np.linalg.norm(oa), ob / np.linalg.norm(ob)
    poly, _ = safe_box_airmove(a, oa, b, ob, box)
    lo, hi = box.lo, box.hi
    # travel portion: all but the first and last legs
    for p, q in zip(poly[1:-2], poly[2:-1]):
        mid = 0.5 * (p + q)
        inside = np.all(mid > lo + 1e-9) and np.all(mid < hi - 1e-9)
        assert not inside


def test_airmove_rejects_downward_exit():
    box = _box([[0, 0, 0], [10, 10, 10]])
    p = np.array([5.0, 5.0, 5.0])
    down = np.array([0.0, 0.0, -1.0])
    up = np.array([0.0, 0.0, 1.0])
    with pytest.raises(PathPlanError):
        safe_box_airmove(p, down, p + 1.0, up, box)


# ---------------------------------------------------------------------------
# Full column plan


@pytest.fixture(scope="module")
def column_plan(box_column):
    mesh = box_column
    fields = compute_fields(mesh, select_base(mesh))
    plan = plan_isovalues(fields, 3.0, 5.0, 5.0)
    layers = slice_layers(mesh, fields, plan)
    tree = build_skeleton_tree(mesh, fields.dist, layers)
    seq = lpt(tree)
    tp = plan_part(seq, tree)
    return mesh, fields, layers, tree, seq, tp


def test_column_plan_no_retractions(column_plan):
    *_, tp = column_plan
    assert tp.retractions == 0
    assert tp.air_length == 0.0


def test_column_orientations_nearly_vertical(column_plan):
    *_, tp = column_plan
    nrm = np.linalg.norm(tp.orientations, axis=1)
    assert np.abs(nrm - 1.0).max() < 1e-9
    tilt = np.degrees(np.arccos(np.clip(tp.orientations[:, 2], -1, 1)))
    assert tilt.max() < 2.0
    assert np.median(tilt) < 0.5


def test_column_thickness_law(column_plan):
    *_, tp = column_plan
    ext = tp.extrude
    assert (tp.h[ext] > 0).all()
    assert (tp.h[ext] <= 1.5 * 3.0 + 1e-12).all()
    # box column: deviation from the slice interval within 5%
    dev = np.abs(tp.h[ext] - 3.0) / 3.0
    assert dev.max() <= 0.05


def test_column_mass_conservation_identity(column_plan):
    *_, tp = column_plan
    ext = tp.extrude
    lhs = math.pi * 0.875 ** 2 * tp.fm[ext]
    rhs = 0.95 * tp.w[ext] * tp.h[ext] * 10.0
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()
    assert (tp.fm[~ext] == 0.0).all()


def test_column_extrusion_length_accounts_for_all_paths(column_plan):
    mesh, fields, layers, tree, seq, tp = column_plan
    want = 0.0
    for key in seq.order:
        sub = tree.node(key)
        t = trim_to_eulerian(sub)
        p = sub.graph.positions
        want += np.linalg.norm(p[t.edges[:, 0]] - p[t.edges[:, 1]],
                               axis=1).sum()
        for lp in support_perimeter(sub, t, 0.8):
            want += lp.length
    seg = np.linalg.norm(np.diff(tp.positions, axis=0), axis=1)
    got = seg[tp.extrude[1:]].sum()
    assert abs(got - want) < 1e-6 * max(1.0, want)


def test_column_orientation_matches_host_tet_gradient(column_plan):
    mesh, fields, layers, *_ = column_plan
    g = layers[len(layers) // 2]
    sel = g.host_kinds == HOST_TET
    assert sel.any()
    want = fields.frames.nozzle[g.host_ids[sel]]
    assert np.abs(g.normals[sel] - want).max() <= 1e-9


def test_toolpath_summary(column_plan):
    *_, tree, seq, tp = column_plan
    s = tp.summary()
    assert s["n_subgraphs"] == len(seq.order) == len(tree.nodes)
    assert s["retractions"] == 0
    assert s["extrusion_length_mm"] > 0
    assert s["estimated_time_s"] > 0


# ---------------------------------------------------------------------------
# Serialization


def test_jsonl_round_trip_and_determinism(tmp_path, column_plan):
    *_, tp = column_plan
    path = tmp_path / "path.jsonl"
    write_toolpath(path, tp)
    first = path.read_bytes()
    write_toolpath(path, tp)
    assert path.read_bytes() == first

    back = read_toolpath(path)
    assert len(back["x"]) == tp.n_waypoints
    assert np.abs(back["x"] - tp.positions[:, 0]).max() <= 5e-7
    assert np.array_equal(back["h"], tp.h)
    assert np.array_equal(back["fm"], tp.fm)
    assert np.array_equal(back["extrude"], tp.extrude)
    assert np.array_equal(back["layer"], tp.layer)

    line = path.read_text().splitlines()[0]
    rec = json.loads(line)
    assert list(rec) == ["x", "y", "z", "ox", "oy", "oz", "h", "w",
                        "fp", "fm", "extrude", "layer", "subgraph"]


def test_csv_and_obj_exports(tmp_path, column_plan):
    *_, tp = column_plan
    csv = tmp_path / "path.csv"
    write_toolpath_csv(csv, tp)
    rows = csv.read_text().splitlines()
    assert len(rows) == tp.n_waypoints + 1
    assert len(rows[0].split(",")) == 8

    obj = tmp_path / "path.obj"
    write_toolpath_obj(obj, tp)
    text = obj.read_text().splitlines()
    nv = sum(1 for l in text if l.startswith("v "))
    nl = sum(1 for l in text if l.startswith("l "))
    assert nv == tp.n_waypoints and nl >= 1
