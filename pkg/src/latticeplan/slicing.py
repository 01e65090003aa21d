"""Curved-layer slicing: per-layer lattice infill graphs on iso-surfaces.

Each layer is the iso-surface of the slicing distance field at one planned
iso-value.  Within every tet all three fields are linear, so the layer cuts
a tet in a planar convex polygon; the two transverse fields rule that
polygon with two families of straight isolines whose intersections form a
quad lattice.  The layer graph collects:

* isoline vertices on mesh faces (one per face / transverse iso-value),
* isoline edges inside tets (pairing the two face vertices of an isoline),
* crossing vertices where a u-isoline meets a v-isoline inside a tet
  (splitting both edges, degree 4),
* boundary vertices where the layer's iso-contour crosses boundary edges,
* boundary edges chaining those along boundary faces, split at any isoline
  vertices that lie on the boundary face (those become degree 3).

Degrees are therefore always in {2, 3, 4}.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import FieldSet
from .tetmesh import SurfaceMesh, TetMesh

logger = logging.getLogger(__name__)

# vertex kinds
U_ISO, V_ISO, CROSS, BOUNDARY = 0, 1, 2, 3
KIND_NAMES = {U_ISO: "u-isoline", V_ISO: "v-isoline", CROSS: "crossing",
              BOUNDARY: "boundary-interp"}
# edge kinds
EDGE_U, EDGE_V, EDGE_BOUNDARY = 0, 1, 2
EDGE_KIND_NAMES = {EDGE_U: "u", EDGE_V: "v", EDGE_BOUNDARY: "boundary"}
# host kinds
HOST_FACE, HOST_TET, HOST_EDGE = 0, 1, 2

MERGE_TOL = 1e-6          # mm; coincident-vertex merge on boundary chains
CROSS_AGREE_TOL = 1e-6    # mm; the two closed forms of a crossing must agree
_PAR_EPS = 1e-12          # near-parallel crossing denominator cutoff


class SlicingError(Exception):
    """Planning or layer-graph construction failed."""


# ---------------------------------------------------------------------------
# Iso-value planning


@dataclass
class IsoPlan:
    """Strictly increasing iso-value lists for the three fields.

    ``slice_intervals[i]`` is the distance-field gap below slice i (the gap
    to the previous slice, or to 0 for the first one).
    """
    slice_values: np.ndarray
    u_values: np.ndarray
    v_values: np.ndarray

    @property
    def slice_intervals(self) -> np.ndarray:
        return np.diff(self.slice_values, prepend=0.0)

    @property
    def n_layers(self) -> int:
        return len(self.slice_values)


def _perturb_off(values: np.ndarray, interval: float, samples: np.ndarray,
                 upper: float) -> np.ndarray:
    """Nudge iso-values off exact vertex-value collisions, staying in (0, upper)."""
    samples = np.sort(samples)
    step = 1e-7 * interval
    tol = 1e-9 * interval
    out = []
    for x in values:
        for sign in (1.0, -1.0):
            y = float(x)
            for _ in range(100):
                i = np.searchsorted(samples, y)
                near = ((i < len(samples) and abs(samples[i] - y) <= tol)
                        or (i > 0 and abs(samples[i - 1] - y) <= tol))
                if not near:
                    break
                y += sign * step
            if 0.0 < y < upper and not near:
                out.append(y)
                break
        else:
            raise SlicingError(f"could not place iso-value near {x} inside (0, {upper})")
    return np.asarray(out)


def _plan_axis(field_values: np.ndarray, step: float | None,
               explicit, name: str) -> np.ndarray:
    top = float(field_values.max())
    if explicit is not None:
        vals = np.asarray(explicit, dtype=np.float64)
        if len(vals) == 0:
            raise SlicingError(f"empty explicit {name} iso-value list")
        if np.any(np.diff(vals) <= 0):
            raise SlicingError(f"explicit {name} iso-values must be strictly increasing")
        if vals[0] <= 0 or vals[-1] >= top:
            raise SlicingError(f"explicit {name} iso-values must lie strictly inside "
                               f"(0, {top})")
        ref = float(np.diff(vals).min()) if len(vals) > 1 else min(vals[0], top - vals[-1])
        return _perturb_off(vals, ref, field_values, top)
    if step is None or step <= 0:
        raise SlicingError(f"{name} interval must be positive")
    k = int(np.floor(top / step))
    while k >= 1 and k * step >= top:
        k -= 1
    if k < 1:
        raise SlicingError(f"{name} interval {step} exceeds the field range {top}: "
                           "empty plan")
    cand = step * np.arange(1, k + 1)
    if top - cand[-1] < 0.2 * step:
        # an iso nearly coincident with the field max would cut through the
        # solver noise on the far face and fragment into slivers; pull it
        # down so it slices one clean cross-section below that face
        cand[-1] = top - 0.05 * step
    return _perturb_off(cand, step, field_values, top)


def plan_isovalues(fields: FieldSet, slice_step: float | None = None,
                   u_step: float | None = None, v_step: float | None = None,
                   slice_values=None, u_values=None, v_values=None) -> IsoPlan:
    """Regular iso-value ladders {d, 2d, ...} below each field max.

    Explicit lists override the step for that axis (non-uniform spacing is
    allowed).  All values are nudged off exact vertex field values, and a
    final ladder value nearly coincident with the field max is pulled just
    below it so the last cross-section stays whole.
    """
    return IsoPlan(
        _plan_axis(fields.dist, slice_step, slice_values, "slice"),
        _plan_axis(fields.u, u_step, u_values, "u"),
        _plan_axis(fields.v, v_step, v_values, "v"),
    )


# ---------------------------------------------------------------------------
# Scalar geometric primitives (the vectorized builder mirrors these)


def isoline_vertex(tri_pos, slice_vals, other_vals, slice_iso, other_iso):
    """Intersection of a transverse isoline with a face's slice contour.

    The face's slice contour is the segment P-Q where the slicing field
    equals ``slice_iso`` (requires a strict two-sided sign split among the
    corners); the vertex is where the other field hits ``other_iso`` on that
    segment.  Returns (position, barycentric coords) or None.
    """
    tri_pos = np.asarray(tri_pos, dtype=np.float64)
    g = np.asarray(slice_vals, dtype=np.float64)
    f = np.asarray(other_vals, dtype=np.float64)
    above = g > slice_iso
    if above.all() or (~above).all():
        return None
    lone = int(np.argmax(above)) if above.sum() == 1 else int(np.argmax(~above))
    o1, o2 = (lone + 1) % 3, (lone + 2) % 3
    tp = (slice_iso - g[lone]) / (g[o1] - g[lone])
    tq = (slice_iso - g[lone]) / (g[o2] - g[lone])
    fp = f[lone] + tp * (f[o1] - f[lone])
    fq = f[lone] + tq * (f[o2] - f[lone])
    if not (fp - other_iso) * (fq - other_iso) < 0:
        return None
    t = (other_iso - fp) / (fq - fp)
    bary = np.zeros(3)
    bary[lone] = (1 - tp) * (1 - t) + (1 - tq) * t
    bary[o1] = tp * (1 - t)
    bary[o2] = tq * t
    return tri_pos.T @ bary, bary


def boundary_vertex(p0, p1, g0, g1, iso):
    """Slice-contour crossing on a boundary edge: lerp by the slicing field."""
    if not (g0 - iso) * (g1 - iso) < 0:
        return None
    t = (iso - g0) / (g1 - g0)
    return np.asarray(p0) + t * (np.asarray(p1) - np.asarray(p0)), t


# ---------------------------------------------------------------------------
# Layer graph


@dataclass
class LayerGraph:
    """Lattice infill graph of one curved layer."""
    layer: int                 # index in the slicing plan
    iso: float                 # slicing-field iso-value
    positions: np.ndarray      # (n, 3)
    kinds: np.ndarray          # (n,) int8, U_ISO/V_ISO/CROSS/BOUNDARY
    on_boundary: np.ndarray    # (n,) bool
    host_kinds: np.ndarray     # (n,) int8, HOST_FACE/HOST_TET/HOST_EDGE
    host_ids: np.ndarray       # (n,)
    normals: np.ndarray        # (n, 3) layer surface normal (slice-gradient dir)
    field_dist: np.ndarray     # (n,) interpolated slicing field
    field_u: np.ndarray
    field_v: np.ndarray
    edges: np.ndarray          # (m, 2) vertex ids
    edge_kinds: np.ndarray     # (m,) int8 EDGE_U/EDGE_V/EDGE_BOUNDARY
    edge_isos: np.ndarray      # (m,) transverse iso index, -1 for boundary
    edge_hosts: np.ndarray     # (m,) tet id (U/V) or face id (boundary)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n_vertices, dtype=np.int64)
        if self.n_edges:
            np.add.at(d, self.edges.reshape(-1), 1)
        return d

    def edge_lengths(self) -> np.ndarray:
        if not self.n_edges:
            return np.zeros(0)
        return np.linalg.norm(self.positions[self.edges[:, 0]]
                              - self.positions[self.edges[:, 1]], axis=1)


def _empty_graph(layer: int, iso: float) -> LayerGraph:
    z3 = np.zeros((0, 3))
    zi = np.zeros(0, dtype=np.int64)
    zb = np.zeros(0, dtype=bool)
    z8 = np.zeros(0, dtype=np.int8)
    zf = np.zeros(0)
    return LayerGraph(layer, iso, z3, z8.copy(), zb, z8.copy(), zi.copy(), z3.copy(),
                      zf.copy(), zf.copy(), zf.copy(),
                      np.zeros((0, 2), dtype=np.int64), z8.copy(), zi.copy(), zi.copy())


class SliceCache:
    """Per-mesh data shared by every layer build."""

    def __init__(self, mesh: TetMesh, fields: FieldSet):
        self.face_dist = fields.dist[mesh.faces]
        self.face_u = fields.u[mesh.faces]
        self.face_v = fields.v[mesh.faces]
        t0, t1 = mesh.face_tets[:, 0], mesh.face_tets[:, 1]
        n = fields.frames.nozzle[t0].copy()
        interior = t1 >= 0
        n[interior] += fields.frames.nozzle[t1[interior]]
        n /= np.linalg.norm(n, axis=1)[:, None]
        self.face_normal = n
        self.boundary_edge_ids = np.where(mesh.boundary_edge_mask)[0]


class _VertexStore:
    def __init__(self):
        self.pos, self.kind, self.onb = [], [], []
        self.hk, self.hid = [], []
        self.nrm, self.fd, self.fu, self.fv = [], [], [], []
        self.count = 0

    def add_batch(self, pos, kind, onb, hk, hid, nrm, fd, fu, fv) -> np.ndarray:
        k = len(pos)
        ids = np.arange(self.count, self.count + k)
        self.count += k
        self.pos.append(np.asarray(pos, dtype=np.float64).reshape(k, 3))
        self.kind.append(np.full(k, kind, dtype=np.int8) if np.isscalar(kind) else kind)
        self.onb.append(np.broadcast_to(onb, (k,)).astype(bool).copy())
        self.hk.append(np.full(k, hk, dtype=np.int8))
        self.hid.append(np.asarray(hid, dtype=np.int64).reshape(k))
        self.nrm.append(np.asarray(nrm, dtype=np.float64).reshape(k, 3))
        for store, vals in ((self.fd, fd), (self.fu, fu), (self.fv, fv)):
            store.append(np.broadcast_to(np.asarray(vals, dtype=np.float64), (k,)).copy())
        return ids

    def arrays(self):
        if self.count == 0:
            return None
        return (np.concatenate(self.pos), np.concatenate(self.kind),
                np.concatenate(self.onb), np.concatenate(self.hk),
                np.concatenate(self.hid), np.concatenate(self.nrm),
                np.concatenate(self.fd), np.concatenate(self.fu),
                np.concatenate(self.fv))


def _pair_groups(keys: np.ndarray, vids: np.ndarray, positions: np.ndarray,
                 context: str):
    """Pair vertices sharing a key; exactly two per key is the generic case."""
    order = np.argsort(keys, kind="stable")
    keys, vids = keys[order], vids[order]
    starts = np.r_[0, np.where(np.diff(keys) != 0)[0] + 1, len(keys)]
    pairs = []
    for a, b in zip(starts[:-1], starts[1:]):
        group = vids[a:b]
        if len(group) == 2:
            pairs.append((group[0], group[1]))
        elif len(group) > 2:
            logger.warning("%s: %d isoline vertices in one tet group; pairing "
                           "by nearest distance", context, len(group))
            rem = list(group)
            while len(rem) >= 2:
                p0 = rem.pop(0)
                d = np.linalg.norm(positions[rem] - positions[p0], axis=1)
                p1 = rem.pop(int(np.argmin(d)))
                pairs.append((p0, p1))
        else:
            logger.warning("%s: unpaired isoline vertex in a tet; skipping edge",
                           context)
    return pairs


class _UnionFind:
    def __init__(self, n: int, rank_key):
        self.parent = list(range(n))
        self.key = rank_key

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        keep, drop = (ra, rb) if self.key(ra) <= self.key(rb) else (rb, ra)
        self.parent[drop] = keep


def build_layer_graph(mesh: TetMesh, fields: FieldSet, slice_iso: float,
                      u_values: np.ndarray, v_values: np.ndarray,
                      layer_index: int = 0,
                      cache: SliceCache | None = None) -> LayerGraph:
    """Construct the lattice infill graph of one layer (may be empty)."""
    if cache is None:
        cache = SliceCache(mesh, fields)
    iso = float(slice_iso)
    fd = cache.face_dist
    cand_mask = (fd.min(axis=1) < iso) & (fd.max(axis=1) > iso)
    cf = np.where(cand_mask)[0]
    if cf.size == 0:
        return _empty_graph(layer_index, iso)

    # P-Q slice contour per candidate face, with transverse fields lerped on it
    g = fd[cf]
    above = g > iso
    lone = np.where(above.sum(axis=1) == 1, above.argmax(axis=1),
                    (~above).argmax(axis=1))
    rows = np.arange(len(cf))
    o1, o2 = (lone + 1) % 3, (lone + 2) % 3
    cl = mesh.faces[cf, lone]
    c1 = mesh.faces[cf, o1]
    c2 = mesh.faces[cf, o2]
    gl, g1, g2 = g[rows, lone], g[rows, o1], g[rows, o2]
    tp = (iso - gl) / (g1 - gl)
    tq = (iso - gl) / (g2 - gl)
    Vl, V1, V2 = mesh.vertices[cl], mesh.vertices[c1], mesh.vertices[c2]
    P = Vl + tp[:, None] * (V1 - Vl)
    Q = Vl + tq[:, None] * (V2 - Vl)
    fu, fv = cache.face_u, cache.face_v
    uP = fu[cf][rows, lone] + tp * (fu[cf][rows, o1] - fu[cf][rows, lone])
    uQ = fu[cf][rows, lone] + tq * (fu[cf][rows, o2] - fu[cf][rows, lone])
    vP = fv[cf][rows, lone] + tp * (fv[cf][rows, o1] - fv[cf][rows, lone])
    vQ = fv[cf][rows, lone] + tq * (fv[cf][rows, o2] - fv[cf][rows, lone])
    dP = gl + tp * (g1 - gl)
    dQ = gl + tq * (g2 - gl)
    face_onb = mesh.boundary_face_mask[cf]
    face_nrm = cache.face_normal[cf]

    store = _VertexStore()

    def emit_isoline_vertices(kind, values, fA, fB):
        """fA = field being iso'd (P,Q lerps); fB = the other transverse field."""
        faces_out, iso_out, vid_out = [], [], []
        for j, phi in enumerate(values):
            m = (fA[0] - phi) * (fA[1] - phi) < 0
            if not m.any():
                continue
            t = (phi - fA[0][m]) / (fA[1][m] - fA[0][m])
            pos = P[m] + t[:, None] * (Q[m] - P[m])
            other = fB[0][m] + t * (fB[1][m] - fB[0][m])
            dvals = dP[m] + t * (dQ[m] - dP[m])
            if kind == U_ISO:
                fuv = (np.full(m.sum(), phi), other)
            else:
                fuv = (other, np.full(m.sum(), phi))
            ids = store.add_batch(pos, kind, face_onb[m], HOST_FACE, cf[m],
                                  face_nrm[m], dvals, fuv[0], fuv[1])
            faces_out.append(cf[m])
            iso_out.append(np.full(m.sum(), j, dtype=np.int64))
            vid_out.append(ids)
        if not faces_out:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        return (np.concatenate(faces_out), np.concatenate(iso_out),
                np.concatenate(vid_out))

    u_faces, u_iso_idx, u_vids = emit_isoline_vertices(U_ISO, u_values, (uP, uQ), (vP, vQ))
    v_faces, v_iso_idx, v_vids = emit_isoline_vertices(V_ISO, v_values, (vP, vQ), (uP, uQ))

    # ---- isoline edges: pair the two vertices of one isoline inside each tet
    def isoline_edges(faces, iso_idx, vids, kind):
        if not len(faces):
            return []
        t0 = mesh.face_tets[faces, 0]
        t1 = mesh.face_tets[faces, 1]
        tets = np.r_[t0, t1]
        js = np.r_[iso_idx, iso_idx]
        vs = np.r_[vids, vids]
        ok = tets >= 0
        tets, js, vs = tets[ok], js[ok], vs[ok]
        keys = tets * (len(u_values) + len(v_values) + 1) + js
        pos = np.concatenate(store.pos) if store.count else np.zeros((0, 3))
        pairs = _pair_groups(keys, vs, pos, f"layer {layer_index} {EDGE_KIND_NAMES[kind]}-edges")
        out = []
        order = np.argsort(keys, kind="stable")
        # recover host tet / iso index per pair from the grouping key
        kk, vv, tt, jj = keys[order], vs[order], tets[order], js[order]
        starts = np.r_[0, np.where(np.diff(kk) != 0)[0] + 1, len(kk)]
        pi = 0
        for a, b in zip(starts[:-1], starts[1:]):
            group = vv[a:b]
            n_pairs = len(group) // 2
            for _ in range(n_pairs):
                va, vb = pairs[pi]
                out.append([va, vb, kind, jj[a], tt[a]])
                pi += 1
        return out

    u_edges = isoline_edges(u_faces, u_iso_idx, u_vids, EDGE_U)
    v_edges = isoline_edges(v_faces, v_iso_idx, v_vids, EDGE_V)

    arrays = store.arrays()
    pos_all = arrays[0] if arrays else np.zeros((0, 3))
    fd_all = arrays[6] if arrays else np.zeros(0)
    fu_all = arrays[7] if arrays else np.zeros(0)
    fv_all = arrays[8] if arrays else np.zeros(0)

    # ---- crossings inside tets: split u-edges at v-isolines and vice versa
    by_tet: dict[int, tuple[list, list]] = {}
    for idx, e in enumerate(u_edges):
        by_tet.setdefault(int(e[4]), ([], []))[0].append(idx)
    for idx, e in enumerate(v_edges):
        by_tet.setdefault(int(e[4]), ([], []))[1].append(idx)

    u_splits: dict[int, list] = {}
    v_splits: dict[int, list] = {}
    cross_records = []  # (pos, tet, du, u, v)
    for tet in sorted(by_tet):
        ulist, vlist = by_tet[tet]
        if not ulist or not vlist:
            continue
        for ui in ulist:
            ua, ub = u_edges[ui][0], u_edges[ui][1]
            phi_u = u_values[u_edges[ui][3]]
            b1, b2 = fv_all[ua], fv_all[ub]
            for vi in vlist:
                va, vb = v_edges[vi][0], v_edges[vi][1]
                phi_v = v_values[v_edges[vi][3]]
                a1, a2 = fu_all[va], fu_all[vb]
                if not ((b1 - phi_v) * (b2 - phi_v) < 0
                        and (a1 - phi_u) * (a2 - phi_u) < 0):
                    continue
                den_u, den_v = b2 - b1, a2 - a1
                if abs(den_u) < _PAR_EPS or abs(den_v) < _PAR_EPS:
                    logger.warning("layer %d: near-parallel crossing skipped in tet %d",
                                   layer_index, tet)
                    continue
                t_u = (phi_v - b1) / den_u
                t_v = (phi_u - a1) / den_v
                p_from_u = pos_all[ua] + t_u * (pos_all[ub] - pos_all[ua])
                p_from_v = pos_all[va] + t_v * (pos_all[vb] - pos_all[va])
                gap = float(np.linalg.norm(p_from_u - p_from_v))
                if gap > CROSS_AGREE_TOL:
                    raise SlicingError(
                        f"layer {layer_index}: crossing position disagrees between "
                        f"its two closed forms by {gap:.3e} mm in tet {tet}")
                du = fd_all[ua] + t_u * (fd_all[ub] - fd_all[ua])
                cross_records.append((0.5 * (p_from_u + p_from_v), tet, du,
                                      phi_u, phi_v, ui, vi, t_u, t_v))

    cross_ids = np.zeros(len(cross_records), dtype=np.int64)
    if cross_records:
        cpos = np.array([r[0] for r in cross_records])
        ctet = np.array([r[1] for r in cross_records], dtype=np.int64)
        cdu = np.array([r[2] for r in cross_records])
        cu = np.array([r[3] for r in cross_records])
        cv = np.array([r[4] for r in cross_records])
        cnrm = fields.frames.nozzle[ctet]
        cross_ids = store.add_batch(cpos, CROSS, False, HOST_TET, ctet, cnrm,
                                    cdu, cu, cv)
        for k, r in enumerate(cross_records):
            u_splits.setdefault(r[5], []).append((r[7], int(cross_ids[k])))
            v_splits.setdefault(r[6], []).append((r[8], int(cross_ids[k])))

    def split_edges(edge_list, splits):
        out = []
        for idx, e in enumerate(edge_list):
            va, vb, kind, j, tet = e
            if idx not in splits:
                out.append(e)
                continue
            chain = sorted(splits[idx])
            seq = [va] + [vid for _, vid in chain] + [vb]
            for a, b in zip(seq[:-1], seq[1:]):
                out.append([a, b, kind, j, tet])
        return out

    u_edges = split_edges(u_edges, u_splits)
    v_edges = split_edges(v_edges, v_splits)

    # ---- boundary vertices on boundary edges
    be = cache.boundary_edge_ids
    ev = mesh.edges[be]
    d0, d1 = fields.dist[ev[:, 0]], fields.dist[ev[:, 1]]
    bm = (d0 - iso) * (d1 - iso) < 0
    bedge_ids = be[bm]
    t = (iso - d0[bm]) / (d1[bm] - d0[bm])
    pA = mesh.vertices[ev[bm, 0]]
    pB = mesh.vertices[ev[bm, 1]]
    bpos = pA + t[:, None] * (pB - pA)
    bd = d0[bm] + t * (d1[bm] - d0[bm])
    bu = fields.u[ev[bm, 0]] + t * (fields.u[ev[bm, 1]] - fields.u[ev[bm, 0]])
    bv = fields.v[ev[bm, 0]] + t * (fields.v[ev[bm, 1]] - fields.v[ev[bm, 0]])
    if len(bedge_ids):
        bn = np.zeros((len(bedge_ids), 3))
        for k, eid in enumerate(bedge_ids):
            tets = mesh.edge_incident_tets(int(eid))
            v = fields.frames.nozzle[tets].sum(axis=0)
            bn[k] = v / np.linalg.norm(v)
        b_ids = store.add_batch(bpos, BOUNDARY, True, HOST_EDGE, bedge_ids, bn,
                                bd, bu, bv)
        bvid_of_edge = dict(zip(bedge_ids.tolist(), b_ids.tolist()))
    else:
        bvid_of_edge = {}

    if store.count == 0:
        return _empty_graph(layer_index, iso)

    # ---- boundary chains along boundary faces, split at on-face isoline verts
    face_verts: dict[int, list[int]] = {}
    for faces, vids in ((u_faces, u_vids), (v_faces, v_vids)):
        for f, vid in zip(faces, vids):
            if mesh.boundary_face_mask[f]:
                face_verts.setdefault(int(f), []).append(int(vid))

    arrays = store.arrays()
    (pos_all, kind_all, onb_all, hk_all, hid_all, nrm_all,
     fd_all, fu_all, fv_all) = arrays

    kind_rank = {CROSS: 0, U_ISO: 1, V_ISO: 1, BOUNDARY: 2}
    uf = _UnionFind(store.count, lambda i: (kind_rank[int(kind_all[i])], i))

    bnd_edges = []
    row_of = np.full(mesh.n_faces, -1, dtype=np.int64)
    row_of[cf] = rows
    bf_candidates = cf[face_onb]
    # edge slots of the sorted face (a,b)=0, (a,c)=1, (b,c)=2 touching the lone corner
    slot_map = {0: (0, 1), 1: (0, 2), 2: (1, 2)}
    for f in bf_candidates:
        r = row_of[f]
        s1, s2 = slot_map[int(lone[r])]
        e1 = int(mesh.face_edges[f, s1])
        e2 = int(mesh.face_edges[f, s2])
        if e1 not in bvid_of_edge or e2 not in bvid_of_edge:
            logger.warning("layer %d: boundary face %d lacks a chain endpoint",
                           layer_index, f)
            continue
        a_id, b_id = bvid_of_edge[e1], bvid_of_edge[e2]
        pa, pb = pos_all[a_id], pos_all[b_id]
        ab = pb - pa
        ab2 = float(ab @ ab)
        inner = face_verts.get(int(f), [])
        params = [(float((pos_all[v] - pa) @ ab / ab2) if ab2 > 0 else 0.5, v)
                  for v in inner]
        seq = [(0.0, a_id)] + sorted(params) + [(1.0, b_id)]
        # merge coincident consecutive points
        for (ta, va), (tb, vb) in zip(seq[:-1], seq[1:]):
            if np.linalg.norm(pos_all[vb] - pos_all[va]) <= MERGE_TOL:
                uf.union(va, vb)
        for (ta, va), (tb, vb) in zip(seq[:-1], seq[1:]):
            bnd_edges.append([va, vb, EDGE_BOUNDARY, -1, int(f)])

    # ---- canonicalize merged ids, drop collapsed edges, compact
    canon = np.array([uf.find(i) for i in range(store.count)], dtype=np.int64)
    merged = canon != np.arange(store.count)
    if merged.any():
        onb_merge = np.zeros(store.count, dtype=bool)
        np.maximum.at(onb_merge, canon, onb_all)
        onb_all = onb_all | onb_merge

    all_edges = u_edges + v_edges + bnd_edges
    edges = np.array([[canon[e[0]], canon[e[1]]] for e in all_edges],
                     dtype=np.int64) if all_edges else np.zeros((0, 2), dtype=np.int64)
    meta = np.array([[e[2], e[3], e[4]] for e in all_edges],
                    dtype=np.int64) if all_edges else np.zeros((0, 3), dtype=np.int64)
    keep_e = edges[:, 0] != edges[:, 1] if len(edges) else np.zeros(0, dtype=bool)
    edges, meta = edges[keep_e], meta[keep_e]

    deg = np.zeros(store.count, dtype=np.int64)
    if len(edges):
        np.add.at(deg, edges.reshape(-1), 1)
    keep_v = (deg > 0) & (canon == np.arange(store.count))
    dropped = int((~keep_v & (canon == np.arange(store.count))).sum())
    if dropped:
        logger.info("layer %d: dropping %d isolated vertices", layer_index, dropped)
    if not keep_v.any():
        return _empty_graph(layer_index, iso)
    new_id = np.cumsum(keep_v) - 1
    edges = new_id[edges]

    return LayerGraph(
        layer_index, iso, pos_all[keep_v], kind_all[keep_v], onb_all[keep_v],
        hk_all[keep_v], hid_all[keep_v], nrm_all[keep_v], fd_all[keep_v],
        fu_all[keep_v], fv_all[keep_v], edges,
        meta[:, 0].astype(np.int8), meta[:, 1], meta[:, 2])


def slice_layers(mesh: TetMesh, fields: FieldSet, plan: IsoPlan,
                 threads: int = 1) -> list[LayerGraph]:
    """Build one lattice graph per planned slice; empty layers are dropped."""
    cache = SliceCache(mesh, fields)

    def one(i: int) -> LayerGraph:
        return build_layer_graph(mesh, fields, plan.slice_values[i],
                                 plan.u_values, plan.v_values, i, cache)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            graphs = list(ex.map(one, range(plan.n_layers)))
    else:
        graphs = [one(i) for i in range(plan.n_layers)]
    out = []
    for g in graphs:
        if g.n_vertices == 0:
            logger.info("dropping empty layer %d (iso %.6g)", g.layer, g.iso)
        else:
            out.append(g)
    return out


# ---------------------------------------------------------------------------
# Validation


def validate_layer_graph(mesh: TetMesh, graph: LayerGraph,
                         iso_tol: float = 1e-6, hull_tol: float = 1e-6) -> None:
    """Check the layer-graph contract; raises SlicingError on violation."""
    g = graph
    deg = g.degrees()
    if g.n_vertices == 0:
        return
    bad = ~np.isin(deg, (2, 3, 4))
    if bad.any():
        raise SlicingError(f"layer {g.layer}: vertex degrees outside {{2,3,4}}: "
                           f"{np.unique(deg[bad])}")
    isoline = np.isin(g.kinds, (U_ISO, V_ISO))
    d3 = deg == 3
    if not np.array_equal(d3, isoline & g.on_boundary):
        raise SlicingError(f"layer {g.layer}: degree-3 vertices are not exactly "
                           "the boundary/isoline intersections")
    if not np.all(deg[g.kinds == CROSS] == 4):
        raise SlicingError(f"layer {g.layer}: crossing vertex without degree 4")
    if not np.all(deg[g.kinds == BOUNDARY] == 2):
        raise SlicingError(f"layer {g.layer}: boundary-interp vertex degree != 2")
    err = np.abs(g.field_dist - g.iso)
    if err.max(initial=0.0) > iso_tol:
        raise SlicingError(f"layer {g.layer}: vertex slicing-field value deviates "
                           f"from the iso-value by {err.max():.3e} mm")
    nrm = np.abs(np.linalg.norm(g.normals, axis=1) - 1.0)
    if nrm.max(initial=0.0) > 1e-9:
        raise SlicingError(f"layer {g.layer}: non-unit vertex normal")
    # per-loop parity of degree-3 vertices
    for loop in boundary_loops(g):
        n3 = int((deg[loop] == 3).sum())
        if n3 % 2:
            raise SlicingError(f"layer {g.layer}: boundary loop with odd degree-3 "
                               f"count {n3}")
    _check_edge_hosts(mesh, g, hull_tol)


def _check_edge_hosts(mesh: TetMesh, g: LayerGraph, tol: float) -> None:
    for kinds, host_is_tet in ((np.array([EDGE_U, EDGE_V], dtype=np.int8), True),
                               (np.array([EDGE_BOUNDARY], dtype=np.int8), False)):
        sel = np.isin(g.edge_kinds, kinds)
        if not sel.any():
            continue
        hosts = g.edge_hosts[sel]
        tets = hosts if host_is_tet else mesh.face_tets[hosts, 0]
        corners = mesh.vertices[mesh.tets[tets]]          # (k, 4, 3)
        pts = g.positions[g.edges[sel]]                   # (k, 2, 3)
        a = corners[:, 0]
        M = np.stack([corners[:, 1] - a, corners[:, 2] - a,
                      corners[:, 3] - a], axis=2)         # (k, 3, 3)
        local = np.linalg.solve(M[:, None].repeat(2, 1).reshape(-1, 3, 3),
                                (pts - a[:, None]).reshape(-1, 3, 1)).reshape(-1, 3)
        bc = np.column_stack([1 - local.sum(axis=1), local])
        if bc.min() < -tol or bc.max() > 1 + tol:
            raise SlicingError(f"layer {g.layer}: edge endpoint outside its host "
                               f"tet (bary min {bc.min():.2e}, max {bc.max():.2e})")


def boundary_loops(graph: LayerGraph) -> list[np.ndarray]:
    """Closed vertex cycles formed by the boundary edges of one layer."""
    sel = graph.edge_kinds == EDGE_BOUNDARY
    adj: dict[int, list[int]] = {}
    for a, b in graph.edges[sel]:
        adj.setdefault(int(a), []).append(int(b))
        adj.setdefault(int(b), []).append(int(a))
    for v, nb in adj.items():
        if len(nb) != 2:
            raise SlicingError(f"layer {graph.layer}: boundary vertex {v} has "
                               f"{len(nb)} boundary edges (loop not closed)")
    loops = []
    seen: set[int] = set()
    for start in sorted(adj):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = -1, start
        while True:
            nxt = [w for w in adj[cur] if w != prev]
            nxt = nxt[0] if nxt else prev  # two-vertex loop fallback
            if nxt == start:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        loops.append(np.array(loop, dtype=np.int64))
    return loops


# ---------------------------------------------------------------------------
# Overhang diagnostics


def overhang_angles(surface: SurfaceMesh, nozzle_per_tet: np.ndarray) -> np.ndarray:
    """Angle (degrees) between nozzle orientation and outward face normal.

    ``nozzle_per_tet`` is either an (m, 3) per-tet array or a single fixed
    direction.  90 deg = vertical wall; > 135 deg = strong overhang.
    """
    n = np.asarray(nozzle_per_tet, dtype=np.float64)
    if n.ndim == 1:
        dirs = np.broadcast_to(n / np.linalg.norm(n), surface.normals.shape)
    else:
        dirs = n[surface.tet_ids]
    cosang = np.clip(np.einsum("bd,bd->b", dirs, surface.normals), -1.0, 1.0)
    return np.degrees(np.arccos(cosang))


def flag_overhangs(angles: np.ndarray, threshold: float = 135.0) -> np.ndarray:
    return np.asarray(angles) > threshold


# ---------------------------------------------------------------------------
# Serialization


def write_layer_file(path: str | Path, graphs: list[LayerGraph]) -> None:
    """Structured text dump of layer graphs (bit-exact round trip)."""
    with open(path, "w") as fh:
        fh.write(f"layers {len(graphs)}\n")
        for g in graphs:
            fh.write(f"layer {g.layer} {float(g.iso)!r}\n")
            fh.write(f"vertices {g.n_vertices}\n")
            for i in range(g.n_vertices):
                x, y, z = g.positions[i]
                nx, ny, nz = g.normals[i]
                fh.write(f"{int(g.kinds[i])} {int(g.on_boundary[i])} "
                         f"{int(g.host_kinds[i])} {int(g.host_ids[i])} "
                         f"{float(x)!r} {float(y)!r} {float(z)!r} "
                         f"{float(nx)!r} {float(ny)!r} {float(nz)!r} "
                         f"{float(g.field_dist[i])!r} {float(g.field_u[i])!r} "
                         f"{float(g.field_v[i])!r}\n")
            fh.write(f"edges {g.n_edges}\n")
            for i in range(g.n_edges):
                fh.write(f"{int(g.edges[i, 0])} {int(g.edges[i, 1])} "
                         f"{int(g.edge_kinds[i])} {int(g.edge_isos[i])} "
                         f"{int(g.edge_hosts[i])}\n")
        fh.write("end\n")


def read_layer_file(path: str | Path) -> list[LayerGraph]:
    tokens = Path(path).read_text().split("\n")
    pos = 0

    def line() -> list[str]:
        nonlocal pos
        while tokens[pos].strip() == "":
            pos += 1
        pos += 1
        return tokens[pos - 1].split()

    head = line()
    if head[0] != "layers":
        raise SlicingError(f"not a layer file: {path}")
    graphs = []
    for _ in range(int(head[1])):
        tag, layer, iso = line()
        if tag != "layer":
            raise SlicingError("malformed layer file")
        nv = int(line()[1])
        kinds = np.zeros(nv, dtype=np.int8)
        onb = np.zeros(nv, dtype=bool)
        hk = np.zeros(nv, dtype=np.int8)
        hid = np.zeros(nv, dtype=np.int64)
        P = np.zeros((nv, 3))
        N = np.zeros((nv, 3))
        fd = np.zeros(nv)
        fu = np.zeros(nv)
        fv = np.zeros(nv)
        for i in range(nv):
            rec = line()
            kinds[i], onb[i], hk[i], hid[i] = (int(rec[0]), bool(int(rec[1])),
                                               int(rec[2]), int(rec[3]))
            P[i] = [float(v) for v in rec[4:7]]
            N[i] = [float(v) for v in rec[7:10]]
            fd[i], fu[i], fv[i] = float(rec[10]), float(rec[11]), float(rec[12])
        ne = int(line()[1])
        E = np.zeros((ne, 2), dtype=np.int64)
        ek = np.zeros(ne, dtype=np.int8)
        ei = np.zeros(ne, dtype=np.int64)
        eh = np.zeros(ne, dtype=np.int64)
        for i in range(ne):
            rec = line()
            E[i] = [int(rec[0]), int(rec[1])]
            ek[i], ei[i], eh[i] = int(rec[2]), int(rec[3]), int(rec[4])
        graphs.append(LayerGraph(int(layer), float(iso), P, kinds, onb, hk, hid,
                                 N, fd, fu, fv, E, ek, ei, eh))
    return graphs


def write_layers_obj(path: str | Path, graphs: list[LayerGraph]) -> None:
    """OBJ export: one object per layer, edges as line elements."""
    with open(path, "w") as fh:
        offset = 1
        for g in graphs:
            fh.write(f"o layer_{g.layer}\n")
            for p in g.positions:
                fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
            for a, b in g.edges:
                fh.write(f"l {offset + int(a)} {offset + int(b)}\n")
            offset += g.n_vertices
