"""Continuous extrusion paths for printed sub-graphs.

Turns each sub-graph of a printing sequence into nozzle waypoints:

* ``trim_to_eulerian`` removes alternating boundary chains so every vertex
  has even degree and a continuous tour exists;
* ``euler_tour`` walks each trimmed component covering every edge once,
  switching isoline families at each degree-4 crossing so the extruded path
  never crosses itself;
* ``support_perimeter`` shrinks each boundary loop inward by the path width
  and bridges the removed chains with triangular teeth that support the
  layer above;
* ``layer_thickness`` measures the gap down to the previously printed
  layer, capped at ``clamp_factor * phi``;
* ``filament_feed`` converts the deposited cross-section times nozzle speed
  into filament speed by volume conservation;
* ``safe_box_airmove`` routes retraction transitions over an inflated
  bounding box of everything printed so far;
* ``plan_part`` assembles all of the above along a printing sequence into a
  single :class:`ToolPath` with per-waypoint position, nozzle orientation,
  layer thickness and feeds.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .slicing import EDGE_BOUNDARY

logger = logging.getLogger(__name__)

DEFAULT_PATH_WIDTH = 0.8          # mm
DEFAULT_CLAMP_FACTOR = 1.5        # cap h at clamp_factor * layer interval
DEFAULT_FLOW_FACTOR = 0.95        # fraction of the nominal volume extruded
DEFAULT_FILAMENT_RADIUS = 0.875   # mm
DEFAULT_NOZZLE_FEED = 10.0        # mm/s
DEFAULT_AIR_FEED = 50.0           # mm/s, used only for time estimates
DEFAULT_NOZZLE_LENGTH = 50.0      # mm
SAFE_MARGIN_PAD = 5.0             # extra box margin beyond the nozzle length
_MITER_LIMIT = 4.0                # cap on the corner offset scale


class PathPlanError(RuntimeError):
    """Raised when a sub-graph cannot be turned into a continuous path."""


# ---------------------------------------------------------------------------
# Trimming boundary chains to make all degrees even


@dataclass
class TrimmedGraph:
    """Sub-graph copy with alternating boundary chains removed."""
    sub: object                 # source SubGraph
    edges: np.ndarray           # (m, 2) kept edges, parent vertex ids
    edge_kinds: np.ndarray      # (m,) kinds of the kept edges
    removed_edges: np.ndarray   # (r, 2) removed boundary edges
    removed_spans: list         # ordered parent-id array per removed chain


def trim_to_eulerian(sub) -> TrimmedGraph:
    """Delete every second boundary chain between degree-3 vertices.

    Walking each boundary loop, the degree-3 vertices (isoline feet) come in
    an even count; the chains between the 2nd and 3rd, 4th and 5th, ... feet
    are removed, dropping each foot to degree 2.
    """
    g = sub.graph
    edges = g.edges[sub.edge_ids]
    kinds = g.edge_kinds[sub.edge_ids]
    deg = np.zeros(g.n_vertices, dtype=np.int64)
    np.add.at(deg, edges[:, 0], 1)
    np.add.at(deg, edges[:, 1], 1)

    removed_pairs: set = set()
    spans = []
    for loop in sub.loops:
        loop = np.asarray(loop, dtype=np.int64)
        feet = [i for i, v in enumerate(loop) if deg[v] == 3]
        if not feet:
            continue
        if len(feet) % 2:
            raise PathPlanError(
                f"sub-graph {sub.key}: boundary loop carries an odd number "
                f"of degree-3 vertices ({len(feet)})")
        m = len(loop)
        for t in range(1, len(feet), 2):
            a, b = feet[t], feet[(t + 1) % len(feet)]
            span = [int(loop[a])]
            i = a
            while i != b:
                i = (i + 1) % m
                span.append(int(loop[i]))
            spans.append(np.asarray(span, dtype=np.int64))
            for p, q in zip(span, span[1:]):
                removed_pairs.add(frozenset((p, q)))

    if removed_pairs:
        drop = np.fromiter(
            (frozenset((int(a), int(b))) in removed_pairs
             and k == EDGE_BOUNDARY
             for (a, b), k in zip(edges, kinds)), dtype=bool, count=len(edges))
    else:
        drop = np.zeros(len(edges), dtype=bool)

    kept = edges[~drop]
    deg2 = np.zeros(g.n_vertices, dtype=np.int64)
    np.add.at(deg2, kept[:, 0], 1)
    np.add.at(deg2, kept[:, 1], 1)
    odd = np.flatnonzero(deg2 % 2)
    if odd.size:
        raise PathPlanError(
            f"sub-graph {sub.key}: trimming left odd degrees at vertices "
            f"{odd[:5].tolist()}")
    return TrimmedGraph(sub=sub, edges=kept, edge_kinds=kinds[~drop],
                        removed_edges=edges[drop], removed_spans=spans)


# ---------------------------------------------------------------------------
# Euler tours with forced turns at crossings


def _angular_order(center, normal, dirs):
    """Indices of ``dirs`` sorted by angle around ``normal``."""
    ref = dirs[0] - np.dot(dirs[0], normal) * normal
    nrm = np.linalg.norm(ref)
    if nrm < 1e-12:
        # first edge parallel to the normal; fall back to any transverse axis
        ref = np.array([1.0, 0.0, 0.0])
        ref -= np.dot(ref, normal) * normal
        if np.linalg.norm(ref) < 1e-12:
            ref = np.array([0.0, 1.0, 0.0])
            ref -= np.dot(ref, normal) * normal
        nrm = np.linalg.norm(ref)
    t1 = ref / nrm
    t2 = np.cross(normal, t1)
    ang = np.arctan2(dirs @ t2, dirs @ t1)
    return np.argsort(ang, kind="stable")


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)
            return True
        return False


def euler_tour(trimmed: TrimmedGraph) -> list:
    """Closed walks covering each trimmed edge exactly once.

    Each connected component yields one closed vertex walk (first vertex
    repeated at the end).  At degree-4 crossings the walk always leaves on
    the other isoline family, taking an angularly adjacent edge, so the
    deposited path turns instead of crossing over itself.
    """
    edges = np.asarray(trimmed.edges)
    if len(edges) == 0:
        return []
    g = trimmed.sub.graph
    pos, nrm = g.positions, g.normals

    incident: dict = {}
    for e, (a, b) in enumerate(edges):
        incident.setdefault(int(a), []).append(e)
        incident.setdefault(int(b), []).append(e)

    def other(e, v):
        a, b = edges[e]
        return int(b) if int(a) == v else int(a)

    # transition system: partner edge for each (vertex, incident edge)
    pair: dict = {}
    for v, inc in incident.items():
        if len(inc) == 2:
            pair[v] = {inc[0]: inc[1], inc[1]: inc[0]}
        elif len(inc) == 4:
            dirs = np.array([pos[other(e, v)] - pos[v] for e in inc])
            lens = np.linalg.norm(dirs, axis=1)
            dirs = dirs / np.where(lens < 1e-30, 1.0, lens)[:, None]
            order = [inc[i] for i in _angular_order(pos[v], nrm[v], dirs)]
            kinds = [int(trimmed.edge_kinds[e]) for e in order]
            if kinds[0] == kinds[1] or kinds[1] == kinds[2]:
                # angular alternation failed (degenerate geometry): pair the
                # two families directly by index order
                fam = {}
                for e in order:
                    fam.setdefault(int(trimmed.edge_kinds[e]), []).append(e)
                fams = sorted(fam)
                if len(fams) != 2 or any(len(fam[f]) != 2 for f in fams):
                    raise PathPlanError(
                        f"sub-graph {trimmed.sub.key}: crossing {v} lacks "
                        "two edges of each isoline family")
                (a1, a2), (b1, b2) = fam[fams[0]], fam[fams[1]]
                pair[v] = {a1: b1, b1: a1, a2: b2, b2: a2}
                logger.debug("crossing %d: fell back to family pairing", v)
            else:
                a1, b1, a2, b2 = order
                pair[v] = {a1: b1, b1: a1, a2: b2, b2: a2}
        else:
            raise PathPlanError(
                f"sub-graph {trimmed.sub.key}: vertex {v} has odd or "
                f"oversized degree {len(inc)} after trimming")

    # decompose the transition system into edge cycles
    def cycles_of(pair):
        cyc_of_edge = np.full(len(edges), -1, dtype=np.int64)
        n_cyc = 0
        for e0 in range(len(edges)):
            if cyc_of_edge[e0] >= 0:
                continue
            e, v = e0, int(edges[e0][0])     # traverse e0 away from v
            while cyc_of_edge[e] < 0:
                cyc_of_edge[e] = n_cyc
                v = other(e, v)              # arrive here
                e = pair[v][e]               # leave on the partner edge
            n_cyc += 1
        return cyc_of_edge, n_cyc

    cyc_of_edge, n_cyc = cycles_of(pair)
    if n_cyc > 1:
        # merge cycles through shared crossings by flipping to the other
        # turn-pairing (still angularly adjacent, still family-switching)
        dsu = _UnionFind(n_cyc)
        for v, inc in incident.items():
            if len(inc) != 4:
                continue
            e1 = inc[0]
            e2 = pair[v][e1]
            rest = [e for e in inc if e not in (e1, e2)]
            c1 = cyc_of_edge[e1]
            c2 = cyc_of_edge[rest[0]]
            if dsu.union(int(c1), int(c2)):
                # the only other family-switching matching pairs e1 with the
                # rest edge of the opposite isoline family
                k1 = int(trimmed.edge_kinds[e1])
                if int(trimmed.edge_kinds[rest[0]]) != k1:
                    e4, e3 = rest
                else:
                    e3, e4 = rest
                pair[v] = {e1: e4, e4: e1, e2: e3, e3: e2}
        cyc_of_edge, n_cyc = cycles_of(pair)

    # emit one closed vertex walk per cycle (= per component)
    walks = []
    seen = np.zeros(len(edges), dtype=bool)
    for e0 in range(len(edges)):
        if seen[e0]:
            continue
        v0 = int(edges[e0][0])
        walk = [v0]
        e, v = e0, v0
        while True:
            seen[e] = True
            v = other(e, v)
            walk.append(v)
            e = pair[v][e]
            if e == e0:
                break
        if walk[-1] != v0:
            walk.append(v0)
        walks.append(walk)
    walks.sort(key=lambda w: min(w))
    return walks


# ---------------------------------------------------------------------------
# Support perimeter


@dataclass
class PerimeterLoop:
    """Inward offset of one boundary loop, jagged across removed chains."""
    positions: np.ndarray       # (m, 3); closed implicitly (last -> first)
    normals: np.ndarray         # (m, 3) layer normals carried over
    source_ids: np.ndarray      # (m,) parent vertex each point derives from
    n_teeth: int
    degenerate: bool = False

    @property
    def length(self) -> float:
        d = np.roll(self.positions, -1, axis=0) - self.positions
        return float(np.linalg.norm(d, axis=1).sum())


def _offset_loop(p, n, w, interior_sign):
    """Miter-offset a closed loop inward by ``w`` in the layer surface."""
    prev = p - np.roll(p, 1, axis=0)
    nxt = np.roll(p, -1, axis=0) - p
    prev /= np.maximum(np.linalg.norm(prev, axis=1), 1e-30)[:, None]
    nxt /= np.maximum(np.linalg.norm(nxt, axis=1), 1e-30)[:, None]
    in_prev = interior_sign * np.cross(n, prev)
    in_next = interior_sign * np.cross(n, nxt)
    miter = in_prev + in_next
    miter /= np.maximum(np.linalg.norm(miter, axis=1), 1e-30)[:, None]
    cosang = np.einsum("ij,ij->i", miter, in_next)
    scale = w / np.maximum(cosang, 1.0 / _MITER_LIMIT)
    return p + miter * scale[:, None], (cosang < 1.0 / _MITER_LIMIT).any()


def _arc_interp(points, values, s_query):
    """Interpolate a polyline (and companion arrays) by arclength."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    out = np.empty((len(s_query), points.shape[1]))
    for c in range(points.shape[1]):
        out[:, c] = np.interp(s_query, s, points[:, c])
    extra = [np.empty((len(s_query), v.shape[1])) for v in values]
    for o, v in zip(extra, values):
        for c in range(v.shape[1]):
            o[:, c] = np.interp(s_query, s, v[:, c])
    return out, extra, float(s[-1])


def _loop_plane(loops_pts):
    """Shared 2D frame for nesting tests across one layer's loops."""
    nbar = np.zeros(3)
    for p in loops_pts:
        nbar += np.cross(p, np.roll(p, -1, axis=0)).sum(axis=0)
    nrm = np.linalg.norm(nbar)
    nbar = nbar / nrm if nrm > 1e-30 else np.array([0.0, 0.0, 1.0])
    t1 = np.cross(nbar, [0.0, 0.0, 1.0])
    if np.linalg.norm(t1) < 1e-6:
        t1 = np.cross(nbar, [1.0, 0.0, 0.0])
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(nbar, t1)
    return t1, t2


def _point_in_poly(pt, poly):
    """2D ray-casting parity test."""
    x, y = pt
    a = poly
    b = np.roll(poly, -1, axis=0)
    cond = (a[:, 1] > y) != (b[:, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / \
            (b[:, 1] - a[:, 1])
    return bool(np.count_nonzero(cond & (xs > x)) % 2)


def support_perimeter(sub, trimmed: TrimmedGraph, w: float,
                      tooth_length: float | None = None) -> list:
    """Inward offset of every boundary loop with teeth over removed chains.

    The offset distance is the path width ``w``, taken within the layer's
    local tangent plane toward the material side (hole loops offset away
    from the hole).  Across each removed boundary chain the perimeter
    zig-zags: ``ceil(s / (2 l))`` triangular teeth whose apexes touch the
    original boundary, with ``l = 2 w`` by default.
    """
    if tooth_length is None:
        tooth_length = 2.0 * w
    g = sub.graph
    loops = [np.asarray(lp, dtype=np.int64) for lp in sub.loops
             if len(lp) >= 3]
    if not loops:
        return []
    loops_pts = [g.positions[lp] for lp in loops]
    t1, t2 = _loop_plane(loops_pts)
    flat = [np.stack([p @ t1, p @ t2], axis=1) for p in loops_pts]
    out = []
    for lid, loop in enumerate(loops):
        p = loops_pts[lid]
        n = g.normals[loop]
        nbar = n.mean(axis=0)
        nbar /= max(np.linalg.norm(nbar), 1e-30)
        area = 0.5 * float(np.einsum(
            "ij,j->", np.cross(p, np.roll(p, -1, axis=0)), nbar))
        sign = 1.0 if area >= 0.0 else -1.0
        nested = sum(_point_in_poly(flat[lid][0], flat[j])
                     for j in range(len(loops)) if j != lid)
        if nested % 2:
            sign = -sign          # hole: material lies outside this loop
        q, clipped = _offset_loop(p, n, w, sign)
        inverted = bool((np.einsum(
            "ij,ij->i", np.roll(q, -1, axis=0) - q,
            np.roll(p, -1, axis=0) - p) < 0.0).any())
        degenerate = clipped or inverted
        if degenerate:
            logger.warning("sub-graph %s: thin lobe, perimeter teeth "
                           "degenerate to straight bridging", sub.key)

        pos_of = {int(v): i for i, v in enumerate(loop)}
        span_at = {}
        for span in trimmed.removed_spans:
            if int(span[0]) in pos_of and int(span[-1]) in pos_of:
                span_at[pos_of[int(span[0])]] = np.asarray(span)
        m = len(loop)
        # start the walk at a removed-chain boundary so no span wraps past
        # the end of the index sweep
        start = min(span_at) if span_at else 0
        verts = []       # (q_point, normal, source_id, is_apex)
        step = 0
        while step < m:
            i = (start + step) % m
            span = span_at.get(i)
            if span is None or degenerate:
                verts.append((q[i], n[i], int(loop[i]), False))
                step += 1
                continue
            k = len(span) - 1
            idx = [(i + t) % m for t in range(k + 1)]
            bp = g.positions[span]
            s_len = float(np.linalg.norm(np.diff(bp, axis=0), axis=1).sum())
            n_teeth = max(1, math.ceil(s_len / (2.0 * tooth_length)))
            qs = q[idx]
            ns = n[idx]
            # tooth bases sit on the offset curve, apexes on the boundary
            seg_q = np.linalg.norm(np.diff(qs, axis=0), axis=1)
            tot_q = max(float(seg_q.sum()), 1e-30)
            base_s = np.linspace(0.0, 1.0, n_teeth + 1) * tot_q
            apex_s = (np.arange(n_teeth) + 0.5) / n_teeth * s_len
            base_pts, (base_nrm,), _ = _arc_interp(qs, [ns], base_s)
            apex_pts, (apex_nrm,), _ = _arc_interp(bp, [ns], apex_s)
            for t in range(n_teeth):
                verts.append((base_pts[t], base_nrm[t],
                              int(span[min(t * k // n_teeth, k)]), False))
                verts.append((apex_pts[t], apex_nrm[t],
                              int(span[min((2 * t + 1) * k //
                                           (2 * n_teeth), k)]), True))
            step += k        # resume at the span's final foot
        positions = np.array([v[0] for v in verts])
        normals = np.array([v[1] for v in verts])
        sources = np.array([v[2] for v in verts], dtype=np.int64)
        nt = sum(1 for v in verts if v[3])
        out.append(PerimeterLoop(positions, normals, sources, nt,
                                 degenerate))
    return out


# ---------------------------------------------------------------------------
# Layer thickness


def layer_thickness(sub, prev, clamp_factor: float, phi: float) -> np.ndarray:
    """Per-vertex gap down to the previous layer, capped at clamp * phi.

    ``prev`` is the lower sub-graph, a list of lower sub-graphs (at a merge),
    or None for a first layer, where the build-plate height is used.
    """
    pts = sub.positions()
    cap = clamp_factor * phi
    if prev is None:
        return np.minimum(pts[:, 2], cap)
    prevs = prev if isinstance(prev, (list, tuple)) else [prev]
    seg_a, seg_b = [], []
    for pv in prevs:
        e = pv.graph.edges[pv.edge_ids]
        seg_a.append(pv.graph.positions[e[:, 0]])
        seg_b.append(pv.graph.positions[e[:, 1]])
    a = np.vstack(seg_a)
    b = np.vstack(seg_b)
    if len(a) == 0:
        raise PathPlanError(f"sub-graph {sub.key}: previous layer has no edges")
    ends = np.vstack([a, b])
    tree = cKDTree(ends)
    d_end, _ = tree.query(pts)
    seg_len = np.linalg.norm(b - a, axis=1)
    l_max = float(seg_len.max())
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd < 1e-30, 1.0, dd)
    h = np.empty(len(pts))
    groups = tree.query_ball_point(pts, d_end + l_max + 1e-9)
    n_seg = len(a)
    for i, cand in enumerate(groups):
        seg_ids = np.unique(np.asarray(cand, dtype=np.int64) % n_seg)
        p = pts[i]
        t = np.clip(((p - a[seg_ids]) * d[seg_ids]).sum(axis=1) / dd[seg_ids],
                    0.0, 1.0)
        c = a[seg_ids] + t[:, None] * d[seg_ids]
        h[i] = min(float(d_end[i]),
                   float(np.linalg.norm(c - p, axis=1).min()))
    return np.minimum(h, cap)


# ---------------------------------------------------------------------------
# Filament feed


def filament_feed(h, w, f_p, mu, r_m):
    """Filament speed from volume conservation: mu*w*h*f_p = pi*r_m^2*f_m."""
    arrs = [np.asarray(x, dtype=np.float64) for x in (h, w, f_p, mu, r_m)]
    if any(not np.all(x > 0) for x in arrs):
        raise PathPlanError("filament feed parameters must be positive")
    if not np.all(arrs[3] <= 1.0):
        raise PathPlanError("flow factor cannot exceed 1")
    out = mu * w * np.asarray(h, dtype=np.float64) * f_p / (math.pi * r_m * r_m)
    return float(out) if np.isscalar(h) or np.ndim(h) == 0 else out


# ---------------------------------------------------------------------------
# Safe-box air moves


@dataclass(frozen=True)
class SafeBox:
    """Axis-aligned box around the in-process workpiece plus margin."""
    lo: np.ndarray
    hi: np.ndarray
    margin: float

    @classmethod
    def around(cls, points, margin: float) -> "SafeBox":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise PathPlanError("safe box needs at least one point")
        return cls(pts.min(axis=0) - margin, pts.max(axis=0) + margin,
                   float(margin))


def _ray_box_exit(p, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - p) / d
        t_hi = (hi - p) / d
    t_far = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
    axis = int(np.argmin(t_far))
    t = float(t_far[axis])
    if not np.isfinite(t) or t < -1e-9:
        raise PathPlanError("air-move orientation cannot exit the safe box")
    e = p + max(t, 0.0) * d
    side = 1 if d[axis] > 0 else -1
    e[axis] = hi[axis] if side > 0 else lo[axis]
    return e, axis, side


def safe_box_airmove(p_from, o_from, p_to, o_to, box: SafeBox):
    """Retract, travel over the box surface, descend; returns (polyline, mm).

    The nozzle retracts along its current orientation to the box surface,
    travels on the side/top faces (via the top plane when the exit faces
    differ), and descends along the target orientation.  A downward box exit
    is refused: the printed part is below.
    """
    p_from = np.asarray(p_from, dtype=np.float64)
    p_to = np.asarray(p_to, dtype=np.float64)
    if np.linalg.norm(p_to - p_from) < 1e-12:
        return p_from[None, :].copy(), 0.0
    lo, hi = box.lo, box.hi
    for p in (p_from, p_to):
        if (p < lo - 1e-6).any() or (p > hi + 1e-6).any():
            raise PathPlanError("air-move endpoint outside the safe box")
    route = []
    exits = []
    for p, o in ((p_from, o_from), (p_to, o_to)):
        o = np.asarray(o, dtype=np.float64)
        nrm = np.linalg.norm(o)
        if nrm < 1e-12:
            raise PathPlanError("air-move orientation is zero")
        e, axis, side = _ray_box_exit(p, o / nrm, lo, hi)
        if axis == 2 and side < 0:
            raise PathPlanError(
                "air-move orientation exits through the box bottom")
        exits.append((e, axis, side))
    (e1, ax1, s1), (e2, ax2, s2) = exits
    if (ax1, s1) == (ax2, s2):
        route = [p_from, e1, e2, p_to]
    else:
        r1 = e1.copy()
        r2 = e2.copy()
        r1[2] = hi[2]
        r2[2] = hi[2]
        route = [p_from, e1, r1, r2, e2, p_to]
    poly = [route[0]]
    for p in route[1:]:
        if np.linalg.norm(p - poly[-1]) > 1e-12:
            poly.append(p)
    poly = np.asarray(poly)
    length = float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())
    return poly, length


class AirRouter:
    """Grows a safe box around printed geometry and routes retractions."""

    def __init__(self, margin: float):
        self.margin = float(margin)
        self._lo = None
        self._hi = None

    def expand(self, points) -> None:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        if self._lo is None:
            self._lo, self._hi = lo, hi
        else:
            self._lo = np.minimum(self._lo, lo)
            self._hi = np.maximum(self._hi, hi)

    @property
    def box(self) -> SafeBox:
        if self._lo is None:
            raise PathPlanError("air router has no printed geometry yet")
        return SafeBox(self._lo - self.margin, self._hi + self.margin,
                       self.margin)

    def route(self, p_from, o_from, p_to, o_to):
        return safe_box_airmove(p_from, o_from, p_to, o_to, self.box)


# ---------------------------------------------------------------------------
# Tool path assembly


@dataclass
class PlanParams:
    """Deposition parameters for :func:`plan_part`."""
    path_width: float = DEFAULT_PATH_WIDTH
    clamp_factor: float = DEFAULT_CLAMP_FACTOR
    flow_factor: float = DEFAULT_FLOW_FACTOR
    filament_radius: float = DEFAULT_FILAMENT_RADIUS
    nozzle_feed: float = DEFAULT_NOZZLE_FEED
    tooth_length: float | None = None
    air_feed: float = DEFAULT_AIR_FEED
    nozzle_length: float = DEFAULT_NOZZLE_LENGTH

    @classmethod
    def make(cls, params) -> "PlanParams":
        if params is None:
            return cls()
        if isinstance(params, cls):
            return params
        return cls(**dict(params))


@dataclass
class ToolPath:
    """Waypoint arrays for one full printing plan."""
    positions: np.ndarray       # (n, 3) mm
    orientations: np.ndarray    # (n, 3) unit nozzle directions
    h: np.ndarray               # (n,) layer thickness, 0 on non-extruding
    w: np.ndarray               # (n,) path width
    fp: np.ndarray              # (n,) nozzle feed mm/s
    fm: np.ndarray              # (n,) filament feed mm/s, 0 on non-extruding
    extrude: np.ndarray         # (n,) bool: segment arriving here deposits
    layer: np.ndarray           # (n,) layer id of the owning sub-graph
    subgraph: np.ndarray        # (n,) component index within the layer
    retractions: int
    air_length: float
    air_feed: float = DEFAULT_AIR_FEED

    @property
    def n_waypoints(self) -> int:
        return len(self.positions)

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.positions, axis=0), axis=1)

    def extrusion_length(self) -> float:
        if self.n_waypoints < 2:
            return 0.0
        return float(self.segment_lengths()[self.extrude[1:]].sum())

    def travel_length(self) -> float:
        if self.n_waypoints < 2:
            return 0.0
        return float(self.segment_lengths()[~self.extrude[1:]].sum())

    def summary(self) -> dict:
        ext = self.extrusion_length()
        trav = self.travel_length()
        fp = float(self.fp[self.extrude].mean()) if self.extrude.any() \
            else DEFAULT_NOZZLE_FEED
        return {
            "n_waypoints": int(self.n_waypoints),
            "n_subgraphs": len({(int(l), int(s)) for l, s in
                                zip(self.layer, self.subgraph)}),
            "n_layers": len(set(map(int, self.layer))),
            "extrusion_length_mm": ext,
            "travel_length_mm": trav,
            "air_length_mm": float(self.air_length),
            "retractions": int(self.retractions),
            "estimated_time_s": ext / fp + trav / self.air_feed,
        }


def _rotate_closed(points, start):
    """Rotate a closed point list so it starts (and ends) at ``start``."""
    return points[start:] + points[:start]


def _assemble_sub(sub, trimmed, perim, h_of, entry):
    """Polylines ((positions, normals, h) triples) covering one sub-graph.

    The support perimeter loops come first, then the Euler tours of the
    trimmed lattice; every piece starts at its point nearest the running
    nozzle position.
    """
    g = sub.graph
    polys = []
    cur = entry

    remaining = list(perim)
    while remaining:
        best = None
        for li, lp in enumerate(remaining):
            if cur is None:
                best = (0.0, li, 0)
                break
            d = np.linalg.norm(lp.positions - cur, axis=1)
            i = int(np.argmin(d))
            if best is None or d[i] < best[0]:
                best = (float(d[i]), li, i)
        _, li, i = best
        lp = remaining.pop(li)
        m = len(lp.positions)
        idx = list(range(i, m)) + list(range(i)) + [i]
        pts = lp.positions[idx]
        polys.append((pts, lp.normals[idx], h_of[lp.source_ids[idx]]))
        cur = pts[-1]

    walks = euler_tour(trimmed)
    onb = g.on_boundary
    remaining = [w[:-1] for w in walks]      # drop closing duplicate
    while remaining:
        best = None
        for wi, walk in enumerate(remaining):
            cand = [i for i, v in enumerate(walk) if onb[v]] or \
                list(range(len(walk)))
            if cur is None:
                best = (0.0, wi, cand[0])
                break
            pts = g.positions[[walk[i] for i in cand]]
            d = np.linalg.norm(pts - cur, axis=1)
            i = int(np.argmin(d))
            if best is None or d[i] < best[0]:
                best = (float(d[i]), wi, cand[i])
        _, wi, i = best
        walk = remaining.pop(wi)
        rot = _rotate_closed(walk, i) + [walk[i]]
        ids = np.asarray(rot, dtype=np.int64)
        polys.append((g.positions[ids], g.normals[ids], h_of[ids]))
        cur = polys[-1][0][-1]
    return polys


def plan_part(sequence, tree, params=None, cone=None) -> ToolPath:
    """Assemble the full tool path along a printing sequence.

    ``sequence`` is a PrintSequence or a plain list of sub-graph keys; the
    skeleton tree supplies geometry, lower links (for layer thickness) and
    upper links (to tell contiguous transitions from retractions).
    """
    order = list(getattr(sequence, "order", sequence))
    prm = PlanParams.make(params)
    if cone is not None:
        prm = replace(prm, nozzle_length=float(cone.length))

    layer_iso = {}
    for (layer, _), s in tree.nodes.items():
        layer_iso[layer] = float(s.iso)
    lids = sorted(layer_iso)
    phi = {}
    for i, layer in enumerate(lids):
        phi[layer] = layer_iso[layer] - (layer_iso[lids[i - 1]] if i else 0.0)

    router = AirRouter(prm.nozzle_length + SAFE_MARGIN_PAD)
    pos_l, ori_l, h_l, ext_l, lay_l, subg_l = [], [], [], [], [], []

    def emit(p, o, h, extrude, key):
        pos_l.append(np.asarray(p, dtype=np.float64))
        ori_l.append(np.asarray(o, dtype=np.float64))
        h_l.append(float(h))
        ext_l.append(bool(extrude))
        lay_l.append(key[0])
        subg_l.append(key[1])

    retractions = 0
    air_total = 0.0
    prev_key = None
    up = np.array([0.0, 0.0, 1.0])

    for key in order:
        sub = tree.node(key)
        trimmed = trim_to_eulerian(sub)
        perim = support_perimeter(sub, trimmed, prm.path_width,
                                  prm.tooth_length)
        lowers = [tree.node(k) for k in tree.lower.get(key, [])]
        hv = layer_thickness(sub, lowers or None, prm.clamp_factor,
                             phi[key[0]])
        h_of = np.zeros(sub.graph.n_vertices)
        h_of[sub.vertex_ids] = hv

        entry = pos_l[-1] if pos_l else None
        polys = _assemble_sub(sub, trimmed, perim, h_of, entry)
        if not polys:
            logger.warning("sub-graph %s yields no path; skipped", key)
            continue

        if prev_key is not None and key not in tree.upper.get(prev_key, []):
            # retraction: clear the printed stack over the safe box
            retractions += 1
            router.expand(sub.positions())
            p_from, o_from = pos_l[-1], ori_l[-1]
            p_to, o_to = polys[0][0][0], polys[0][1][0]
            poly, length = router.route(p_from, o_from, p_to, o_to)
            air_total += length
            for i in range(1, len(poly) - 1):
                o = o_from if i == 1 else (o_to if i == len(poly) - 2 else up)
                emit(poly[i], o, 0.0, False, key)

        for pts, nrms, hs in polys:
            emit(pts[0], nrms[0], 0.0, False, key)
            for i in range(1, len(pts)):
                emit(pts[i], nrms[i], hs[i], True, key)

        router.expand(sub.positions())
        prev_key = key

    positions = np.asarray(pos_l)
    orientations = np.asarray(ori_l)
    h = np.asarray(h_l)
    extrude = np.asarray(ext_l, dtype=bool)
    w = np.where(extrude, prm.path_width, 0.0)
    fp = np.full(len(h), prm.nozzle_feed)
    fm = np.zeros(len(h))
    if extrude.any():
        fm[extrude] = filament_feed(h[extrude], prm.path_width,
                                    prm.nozzle_feed, prm.flow_factor,
                                    prm.filament_radius)
    return ToolPath(positions=positions, orientations=orientations, h=h,
                    w=w, fp=fp, fm=fm, extrude=extrude,
                    layer=np.asarray(lay_l, dtype=np.int64),
                    subgraph=np.asarray(subg_l, dtype=np.int64),
                    retractions=retractions, air_length=air_total,
                    air_feed=prm.air_feed)


# ---------------------------------------------------------------------------
# Serialization


def write_toolpath(path: str | Path, tp: ToolPath) -> None:
    """JSON Lines waypoint file (coordinates to 6 decimals, feeds exact)."""
    with open(path, "w") as f:
        for i in range(tp.n_waypoints):
            x, y, z = tp.positions[i]
            ox, oy, oz = tp.orientations[i]
            f.write('{"x": %.6f, "y": %.6f, "z": %.6f, '
                    '"ox": %.6f, "oy": %.6f, "oz": %.6f, '
                    '"h": %s, "w": %s, "fp": %s, "fm": %s, '
                    '"extrude": %s, "layer": %d, "subgraph": %d}\n'
                    % (x, y, z, ox, oy, oz,
                       repr(float(tp.h[i])), repr(float(tp.w[i])),
                       repr(float(tp.fp[i])), repr(float(tp.fm[i])),
                       "true" if tp.extrude[i] else "false",
                       int(tp.layer[i]), int(tp.subgraph[i])))


def read_toolpath(path: str | Path) -> dict:
    """Parse a JSON Lines waypoint file back into arrays."""
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise PathPlanError(f"empty tool path file: {path}")
    out = {}
    for k in ("x", "y", "z", "ox", "oy", "oz", "h", "w", "fp", "fm"):
        out[k] = np.array([r[k] for r in rows], dtype=np.float64)
    out["extrude"] = np.array([r["extrude"] for r in rows], dtype=bool)
    for k in ("layer", "subgraph"):
        out[k] = np.array([r[k] for r in rows], dtype=np.int64)
    return out


def write_toolpath_csv(path: str | Path, tp: ToolPath) -> None:
    """8-column CSV convenience export: x,y,z,ox,oy,oz,h,fm."""
    with open(path, "w") as f:
        f.write("x,y,z,ox,oy,oz,h,fm\n")
        for i in range(tp.n_waypoints):
            x, y, z = tp.positions[i]
            ox, oy, oz = tp.orientations[i]
            f.write("%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n"
                    % (x, y, z, ox, oy, oz, tp.h[i], tp.fm[i]))


def write_toolpath_obj(path: str | Path, tp: ToolPath) -> None:
    """OBJ polyline export: one 'l' element per contiguous extrusion run."""
    with open(path, "w") as f:
        for p in tp.positions:
            f.write("v %.6f %.6f %.6f\n" % tuple(p))
        run = []
        for i in range(tp.n_waypoints):
            if i > 0 and tp.extrude[i]:
                if not run:
                    run = [i - 1]
                run.append(i)
            else:
                if len(run) > 1:
                    f.write("l " + " ".join(str(v + 1) for v in run) + "\n")
                run = []
        if len(run) > 1:
            f.write("l " + " ".join(str(v + 1) for v in run) + "\n")
