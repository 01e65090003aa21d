"""Hand-built layer graphs, sub-graphs and skeleton trees for tests."""

import numpy as np

from latticeplan.skeleton import SkeletonTree, SubGraph
from latticeplan.slicing import (BOUNDARY, CROSS, EDGE_BOUNDARY, EDGE_U,
                                 EDGE_V, HOST_EDGE, LayerGraph, U_ISO, V_ISO)


def wrap_subgraph(pos, nrm, edges, z, layer, index, loops, *, kinds=None,
                  on_boundary=None, edge_kinds=None, edge_isos=None,
                  field_u=None, field_v=None):
    """Package raw arrays as a one-component LayerGraph + SubGraph."""
    pos = np.asarray(pos, dtype=np.float64)
    nrm = np.asarray(nrm, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64)
    nv, ne = len(pos), len(edges)
    if kinds is None:
        kinds = np.full(nv, BOUNDARY, dtype=np.int8)
    if on_boundary is None:
        on_boundary = np.ones(nv, bool)
    if edge_kinds is None:
        edge_kinds = np.full(ne, EDGE_BOUNDARY, dtype=np.int8)
    if edge_isos is None:
        edge_isos = np.zeros(ne)
    if field_u is None:
        field_u = np.zeros(nv)
    if field_v is None:
        field_v = np.zeros(nv)
    g = LayerGraph(layer=layer, iso=float(z), positions=pos,
                   kinds=np.asarray(kinds, dtype=np.int8),
                   on_boundary=np.asarray(on_boundary, bool),
                   host_kinds=np.full(nv, HOST_EDGE, dtype=np.int8),
                   host_ids=np.zeros(nv, np.int64), normals=nrm,
                   field_dist=np.full(nv, float(z)),
                   field_u=np.asarray(field_u, dtype=np.float64),
                   field_v=np.asarray(field_v, dtype=np.float64), edges=edges,
                   edge_kinds=np.asarray(edge_kinds, dtype=np.int8),
                   edge_isos=np.asarray(edge_isos, dtype=np.float64),
                   edge_hosts=np.zeros(ne, np.int64))
    return SubGraph(layer=layer, index=index, iso=float(z), graph=g,
                    vertex_ids=np.arange(nv), edge_ids=np.arange(ne),
                    centroid=pos.mean(axis=0), loops=loops)


def disc_sub(radius, z, n=64, layer=0, index=0, cx=0.0, cy=0.0, lattice=True):
    """Flat circular layer sub-graph at height z, normals +z."""
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    pos = np.column_stack([cx + radius * np.cos(th),
                           cy + radius * np.sin(th),
                           np.full(n, float(z))])
    nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    edges = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    if lattice:
        m = 7
        xs = np.linspace(-radius * 0.8, radius * 0.8, m)
        ipos = np.column_stack([cx + xs, np.full(m, cy), np.full(m, float(z))])
        pos = np.vstack([pos, ipos])
        nrm = np.vstack([nrm, np.tile([0.0, 0.0, 1.0], (m, 1))])
        edges = np.vstack([edges, np.column_stack(
            [n + np.arange(m - 1), n + np.arange(1, m)])])
    return wrap_subgraph(pos, nrm, edges, z, layer, index,
                         loops=[np.arange(n)])


def segment_sub(p, q, z, layer=0, index=0):
    """Two vertices joined by one edge; probes the chord test alone."""
    pos = np.array([p, q], dtype=float)
    nrm = np.tile([0.0, 0.0, 1.0], (2, 1))
    edges = np.array([[0, 1]])
    return wrap_subgraph(pos, nrm, edges, z, layer, index, loops=[])


def annulus_sub(r_out, r_in, z, n=48):
    """Ring layer: outer loop plus inner hole loop."""
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    outer = np.column_stack([r_out * np.cos(th), r_out * np.sin(th),
                             np.full(n, float(z))])
    inner = np.column_stack([r_in * np.cos(th), r_in * np.sin(th),
                             np.full(n, float(z))])
    pos = np.vstack([outer, inner])
    nrm = np.tile([0.0, 0.0, 1.0], (2 * n, 1))
    e_out = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    e_in = n + np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    edges = np.vstack([e_out, e_in])
    return wrap_subgraph(pos, nrm, edges, z, 0, 0,
                         loops=[np.arange(n), n + np.arange(n)])


def square_sub(side, z, per_edge=8):
    """Square boundary loop with sharp corners."""
    s = side / 2.0
    corners = np.array([[-s, -s], [s, -s], [s, s], [-s, s]])
    pts = []
    for a in range(4):
        p, q = corners[a], corners[(a + 1) % 4]
        for t in np.linspace(0.0, 1.0, per_edge, endpoint=False):
            pts.append(p + t * (q - p))
    pts = np.asarray(pts)
    n = len(pts)
    pos = np.column_stack([pts, np.full(n, float(z))])
    nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    edges = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    return wrap_subgraph(pos, nrm, edges, z, 0, 0, loops=[np.arange(n)])


def grid_sub(side=20.0, z=0.0, n_u=3, n_v=3, layer=0, index=0):
    """Square layer crossed by n_u vertical and n_v horizontal isolines.

    Geometry mirrors a flat lattice layer: boundary square (corner vertices
    plus isoline feet), interior crossings of degree 4, isoline feet of
    degree 3.  field_u is x, field_v is y.
    """
    a = side / 2.0
    us = np.linspace(-a, a, n_u + 2)[1:-1]
    vs = np.linspace(-a, a, n_v + 2)[1:-1]
    pos, kinds, onb = [], [], []

    def add(x, y, kind, boundary):
        pos.append((x, y, float(z)))
        kinds.append(kind)
        onb.append(boundary)
        return len(pos) - 1

    corners = [add(-a, -a, BOUNDARY, True), add(a, -a, BOUNDARY, True),
               add(a, a, BOUNDARY, True), add(-a, a, BOUNDARY, True)]
    bot = [add(u, -a, U_ISO, True) for u in us]
    top = [add(u, a, U_ISO, True) for u in us]
    lef = [add(-a, v, V_ISO, True) for v in vs]
    rig = [add(a, v, V_ISO, True) for v in vs]
    crossing = {}
    for i, u in enumerate(us):
        for j, v in enumerate(vs):
            crossing[i, j] = add(u, v, CROSS, False)

    edges, ekinds, eisos = [], [], []

    def link(p, q, kind, iso=0.0):
        edges.append((p, q))
        ekinds.append(kind)
        eisos.append(iso)

    # boundary walk: bottom, right, top (reversed), left (reversed)
    loop = [corners[0], *bot, corners[1], *rig, corners[2],
            *reversed(top), corners[3], *reversed(lef)]
    for p, q in zip(loop, loop[1:] + loop[:1]):
        link(p, q, EDGE_BOUNDARY)
    # vertical isolines (u = const)
    for i in range(len(us)):
        chain = [bot[i]] + [crossing[i, j] for j in range(len(vs))] + [top[i]]
        for p, q in zip(chain, chain[1:]):
            link(p, q, EDGE_U, us[i])
    # horizontal isolines (v = const)
    for j in range(len(vs)):
        chain = [lef[j]] + [crossing[i, j] for i in range(len(us))] + [rig[j]]
        for p, q in zip(chain, chain[1:]):
            link(p, q, EDGE_V, vs[j])

    pos = np.asarray(pos)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pos), 1))
    return wrap_subgraph(pos, nrm, np.asarray(edges), z, layer, index,
                         loops=[np.array(loop)], kinds=kinds,
                         on_boundary=onb, edge_kinds=ekinds, edge_isos=eisos,
                         field_u=pos[:, 0], field_v=pos[:, 1])


def figure_eight_sub(z=0.0):
    """Two squares sharing one degree-4 vertex with alternating edge kinds."""
    pts = [(0, 0), (1, 0), (1, 1), (0, 1), (-1, 0), (-1, -1), (0, -1)]
    pos = np.array([(x, y, float(z)) for x, y in pts])
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    kinds = np.full(len(pts), U_ISO, dtype=np.int8)
    kinds[0] = CROSS
    # cycle A: 0-1-2-3-0, cycle B: 0-4-5-6-0; kinds alternate at vertex 0
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 0],
                      [0, 4], [4, 5], [5, 6], [6, 0]])
    ekinds = np.array([EDGE_U, EDGE_U, EDGE_U, EDGE_V,
                       EDGE_U, EDGE_U, EDGE_U, EDGE_V], dtype=np.int8)
    return wrap_subgraph(pos, nrm, edges, z, 0, 0, loops=[], kinds=kinds,
                         on_boundary=np.zeros(len(pts), bool),
                         edge_kinds=ekinds)


def loop_with_chord_sub(radius=10.0, z=0.0, n=32, n_inner=5):
    """Circle boundary with one straight isoline chord across it.

    The two chord feet are the only degree-3 vertices, so trimming removes
    exactly one half of the boundary circle.
    """
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    pos = np.column_stack([radius * np.cos(th), radius * np.sin(th),
                           np.full(n, float(z))])
    kinds = np.full(n, BOUNDARY, dtype=np.int8)
    onb = np.ones(n, bool)
    half = n // 2
    kinds[0] = kinds[half] = U_ISO             # chord feet at +r and -r
    xs = np.linspace(radius, -radius, n_inner + 2)[1:-1]
    inner = np.column_stack([xs, np.zeros(n_inner), np.full(n_inner, float(z))])
    pos = np.vstack([pos, inner])
    kinds = np.r_[kinds, np.full(n_inner, U_ISO, dtype=np.int8)]
    onb = np.r_[onb, np.zeros(n_inner, bool)]
    edges = [(i, (i + 1) % n) for i in range(n)]
    ekinds = [EDGE_BOUNDARY] * n
    chain = [0] + list(range(n, n + n_inner)) + [half]
    for p, q in zip(chain, chain[1:]):
        edges.append((p, q))
        ekinds.append(EDGE_U)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pos), 1))
    return wrap_subgraph(pos, nrm, np.asarray(edges), z, 0, 0,
                         loops=[np.arange(n)], kinds=kinds, on_boundary=onb,
                         edge_kinds=ekinds)


# ---------------------------------------------------------------------------
# Hand-assembled skeleton trees over disc columns


def chain_tree(n=6, radius=8.0, step=6.0):
    """Straight column: one sub-graph per layer, chain links."""
    nodes = {}
    for k in range(1, n + 1):
        s = disc_sub(radius, step * k, layer=k)
        nodes[s.key] = s
    keys = sorted(nodes)
    upper = {k: [] for k in keys}
    lower = {k: [] for k in keys}
    for a, b in zip(keys, keys[1:]):
        upper[a].append(b)
        lower[b].append(a)
    return SkeletonTree(nodes, upper, lower, [keys[0]])


def branch_tree(trunk=3, branch=3, dx=12.0, radius=5.0, step=6.0):
    """Trunk of ``trunk`` discs splitting into two disc columns at +-dx."""
    nodes = {}
    for k in range(1, trunk + 1):
        s = disc_sub(radius, step * k, layer=k)
        nodes[s.key] = s
    for j in range(1, branch + 1):
        k = trunk + j
        a = disc_sub(radius, step * k, layer=k, index=0, cx=+dx)
        b = disc_sub(radius, step * k, layer=k, index=1, cx=-dx)
        nodes[a.key] = a
        nodes[b.key] = b
    upper = {k: [] for k in nodes}
    lower = {k: [] for k in nodes}

    def link(lo, hi):
        upper[lo].append(hi)
        lower[hi].append(lo)

    for k in range(1, trunk):
        link((k, 0), (k + 1, 0))
    link((trunk, 0), (trunk + 1, 0))
    link((trunk, 0), (trunk + 1, 1))
    for j in range(1, branch):
        k = trunk + j
        link((k, 0), (k + 1, 0))
        link((k, 1), (k + 1, 1))
    return SkeletonTree(nodes, upper, lower, [(1, 0)])


def forest_tree(n=3, dx=5.0, radius=3.0, step=6.0):
    """Two independent disc columns (a two-root forest)."""
    nodes = {}
    for k in range(1, n + 1):
        a = disc_sub(radius, step * k, layer=k, index=0, cx=+dx)
        b = disc_sub(radius, step * k, layer=k, index=1, cx=-dx)
        nodes[a.key] = a
        nodes[b.key] = b
    upper = {k: [] for k in nodes}
    lower = {k: [] for k in nodes}
    for k in range(1, n):
        for idx in (0, 1):
            upper[(k, idx)].append((k + 1, idx))
            lower[(k + 1, idx)].append((k, idx))
    return SkeletonTree(nodes, upper, lower, [(1, 0), (1, 1)])
