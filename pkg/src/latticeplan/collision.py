"""Nozzle-sweep envelopes and potential-collision sub-graph (PCG) lists.

While a sub-graph is printed, the nozzle-plus-toolhead assembly is modeled
as a solid cone of half-angle ``alpha`` and slant length ``L`` standing on
the nozzle tip along the local layer normal.  Sweeping that cone over the
whole sub-graph produces a volume bounded by:

* a ruled "wall" (the cone slant swept along each boundary loop),
* spherical-zone strips (the cone's ball cap swept along the loop), and
* a ceiling over the loop lifted by ``L`` along the layer normals,

closed underneath by a cap on the boundary loop itself.  This closed
triangle mesh is the :class:`EnvelopeVolume`.  Because a solid cone of
larger half-angle contains the smaller one, envelope membership grows
monotonically with ``alpha``.

Another sub-graph "collides" when it reaches into this volume deeper than
a small clearance (default 1 mm): contact shallower than that is below
process resolution, the cone being already a deliberate overestimate of
the toolhead.  ``compute_pcgs`` records, for every sub-graph, the other
sub-graphs that intrude into its envelope; printing any of those first
would put solid material where the toolhead needs to travel.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import SubGraph

logger = logging.getLogger(__name__)

DEFAULT_CLEARANCE = 1.0   # mm of interference below which contact is ignored
_MAX_TURN_DEG = 10.0      # max angle between consecutive sweep generators
_ZONE_STEP_DEG = 10.0     # polar step of the spherical-zone roof strips
_MT_EPS = 1e-12
_CHUNK = 128


class CollisionError(ValueError):
    """Raised for invalid cone parameters or broken envelope geometry."""


@dataclass(frozen=True)
class NozzleCone:
    """Bounding cone of the nozzle/toolhead: half-angle (deg), slant length."""
    alpha_deg: float
    length: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.alpha_deg < 90.0:
            raise CollisionError(
                f"cone half-angle must be in (0, 90) deg, got {self.alpha_deg}")
        if self.length <= 0.0:
            raise CollisionError(f"cone length must be positive, got {self.length}")


@dataclass
class EnvelopeVolume:
    """Closed, outward-oriented triangle mesh of a swept nozzle cone."""
    vertices: np.ndarray   # (n, 3)
    tris: np.ndarray       # (m, 3) indices

    @property
    def n_tris(self) -> int:
        return len(self.tris)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangle_corners(self) -> np.ndarray:
        return self.vertices[self.tris]


def is_watertight(env: EnvelopeVolume) -> bool:
    """Every undirected edge in exactly 2 triangles, in opposite directions."""
    if env.n_tris == 0:
        return False
    t = env.tris
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    if not (counts == 2).all():
        return False
    # orientation consistency: each directed edge must be unique
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    return bool((dcounts == 1).all())


# ---------------------------------------------------------------------------
# Boundary loops as wound polylines


def boundary_loops(sub: SubGraph) -> list[dict]:
    """Ordered boundary loops with positions, normals, and winding fixed.

    Each entry has ``positions`` (k, 3), ``normals`` (k, 3) per-vertex layer
    normals, and ``length``.  Winding is counter-clockwise about the mean
    layer normal for outer loops and clockwise for hole loops (those nested
    inside another loop), so the swept generators always flare away from
    the sub-graph interior.
    """
    out = []
    for loop in sub.loops:
        pos = sub.graph.positions[loop]
        nrm = sub.graph.normals[loop]
        n_mean = nrm.mean(axis=0)
        nn = np.linalg.norm(n_mean)
        n_mean = n_mean / nn if nn > 1e-12 else np.array([0.0, 0.0, 1.0])
        c = pos.mean(axis=0)
        nxt = np.roll(pos, -1, axis=0)
        signed = 0.5 * np.einsum("ij,j->i",
                                 np.cross(pos - c, nxt - c), n_mean).sum()
        if signed < 0.0:
            pos, nrm = pos[::-1].copy(), nrm[::-1].copy()
        seg = np.linalg.norm(np.roll(pos, -1, axis=0) - pos, axis=1)
        out.append({"positions": pos, "normals": nrm,
                    "length": float(seg.sum())})
    if len(out) > 1:
        # flip loops nested inside another loop (crossing parity of one
        # sample vertex in the shared projection plane)
        n_all = np.vstack([lp["normals"] for lp in out]).mean(axis=0)
        nn = np.linalg.norm(n_all)
        n_all = n_all / nn if nn > 1e-12 else np.array([0.0, 0.0, 1.0])
        ref = np.array([0.0, 0.0, 1.0]) if abs(n_all[2]) < 0.9 \
            else np.array([1.0, 0.0, 0.0])
        t1 = np.cross(n_all, ref)
        t1 /= np.linalg.norm(t1)
        frame = np.column_stack([t1, np.cross(n_all, t1)])
        xy = [lp["positions"] @ frame for lp in out]
        for a, lp in enumerate(out):
            crossings = 0
            px, py = xy[a][0]
            for b in range(len(out)):
                if b == a:
                    continue
                p = xy[b]
                q = np.roll(p, -1, axis=0)
                span = (p[:, 1] > py) != (q[:, 1] > py)
                dy = np.where(np.abs(q[:, 1] - p[:, 1]) < 1e-30, 1e-30,
                              q[:, 1] - p[:, 1])
                tx = p[:, 0] + (py - p[:, 1]) / dy * (q[:, 0] - p[:, 0])
                crossings += int((span & (px < tx)).sum())
            if crossings % 2:
                lp["positions"] = lp["positions"][::-1].copy()
                lp["normals"] = lp["normals"][::-1].copy()
    return out


# ---------------------------------------------------------------------------
# Swept-cone envelope


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    v = (1.0 - t) * a + t * b
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else a


def _stations(loop: dict, cone: NozzleCone,
              samples: int | None) -> dict:
    """Sweep stations around one loop: base ids/points, normal + outward axes.

    The generator at polar angle ``theta`` from station ``s`` is
    ``cos(theta) * n_s + sin(theta) * o_s``.  Extra stations are inserted at
    loop corners (sharing the corner base point) wherever consecutive
    full-tilt generators differ by more than ``_MAX_TURN_DEG``, bounding the
    chordal gap of the swept surface.
    """
    pos, nrm = loop["positions"], loop["normals"]
    if samples is not None and samples >= 3:
        seg = np.linalg.norm(np.roll(pos, -1, axis=0) - pos, axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        total = s[-1]
        want = np.linspace(0.0, total, samples, endpoint=False)
        idx = np.searchsorted(s, want, side="right") - 1
        idx = np.clip(idx, 0, len(pos) - 1)
        frac = (want - s[idx]) / np.maximum(seg[idx], 1e-300)
        nxt = np.roll(pos, -1, axis=0)
        nn = np.roll(nrm, -1, axis=0)
        pos = pos[idx] + frac[:, None] * (nxt[idx] - pos[idx])
        nrm = nrm[idx] + frac[:, None] * (nn[idx] - nrm[idx])
    k = len(pos)
    tau = np.roll(pos, -1, axis=0) - np.roll(pos, 1, axis=0)
    tau /= np.maximum(np.linalg.norm(tau, axis=1, keepdims=True), 1e-300)
    n = nrm - np.einsum("ij,ij->i", nrm, tau)[:, None] * tau
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    o = np.cross(tau, n)     # outward for counter-clockwise winding
    alpha = np.radians(cone.alpha_deg)
    gen = np.cos(alpha) * n + np.sin(alpha) * o

    base_ids: list[int] = []
    bases: list[np.ndarray] = []
    axes_n: list[np.ndarray] = []
    axes_o: list[np.ndarray] = []
    max_turn = np.radians(_MAX_TURN_DEG)
    for i in range(k):
        j = (i + 1) % k
        base_ids.append(i)
        bases.append(pos[i])
        axes_n.append(n[i])
        axes_o.append(o[i])
        dot = float(np.clip(gen[i] @ gen[j], -1.0, 1.0))
        ang = np.arccos(dot)
        if ang > max_turn:
            steps = int(np.ceil(ang / max_turn))
            for m in range(1, steps):
                t = m / steps
                nt = _slerp(n[i], n[j], t)
                ot = _slerp(o[i], o[j], t)
                ot = ot - (ot @ nt) * nt
                on = np.linalg.norm(ot)
                if on < 1e-12:
                    continue
                base_ids.append(j)           # corner fan: same base as next
                bases.append(pos[j])
                axes_n.append(nt)
                axes_o.append(ot / on)
    return {"base_ids": np.array(base_ids), "bases": np.array(bases),
            "n": np.array(axes_n), "o": np.array(axes_o),
            "n_base": k, "base_pos": pos, "normal_mean": nrm.mean(axis=0)}


def _ring(st: dict, length: float, theta: float) -> np.ndarray:
    gen = np.cos(theta) * st["n"] + np.sin(theta) * st["o"]
    return st["bases"] + length * gen


def _cap_loop(points: np.ndarray,
              up: np.ndarray) -> tuple[list[tuple[int, int, int]], bool]:
    """Triangulate a closed loop; triangles follow the input loop order.

    Shortest-diagonal ear clipping in the plane perpendicular-ish to ``up``
    (projection only guides ear choice); a centroid fan covers whatever
    remains if the projection is non-simple.  Every boundary edge appears
    exactly once, directed along loop order, so the caller controls the
    cap's orientation by the direction of the loop it passes in.  Returns
    the triangles (index ``len(points)`` refers to the added centroid) and
    whether the centroid fan was used.
    """
    k = len(points)
    if k < 3:
        return [], False
    ref = np.array([1.0, 0.0, 0.0])
    if abs(up @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    t1 = np.cross(up, ref)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(up, t1)
    p2 = np.column_stack([points @ t1, points @ t2])
    area2 = 0.0
    for i in range(k):
        j = (i + 1) % k
        area2 += p2[i, 0] * p2[j, 1] - p2[j, 0] * p2[i, 1]
    ccw = 1.0 if area2 > 0 else -1.0

    idx = list(range(k))
    tris: list[tuple[int, int, int]] = []
    while len(idx) > 3:
        m = len(idx)
        P = p2[idx]                          # (m, 2) in loop order
        A = np.roll(P, 1, axis=0)            # prev corner
        B = P
        Cn = np.roll(P, -1, axis=0)          # next corner
        uv = B - A
        vw = Cn - B
        convex = ccw * (uv[:, 0] * vw[:, 1] - uv[:, 1] * vw[:, 0]) > 1e-15
        # (ear a, vertex b): is vertex b strictly inside ear a?
        def side(p0, p1):
            d = p1 - p0
            return ccw * (d[:, None, 0] * (P[None, :, 1] - p0[:, None, 1])
                          - d[:, None, 1] * (P[None, :, 0] - p0[:, None, 0]))
        inside = ((side(A, B) > 1e-12) & (side(B, Cn) > 1e-12)
                  & (side(Cn, A) > 1e-12))
        ar = np.arange(m)
        inside[ar, ar] = False
        inside[ar, (ar - 1) % m] = False
        inside[ar, (ar + 1) % m] = False
        valid = convex & ~inside.any(axis=1)
        if not valid.any():
            logger.debug("cap triangulation fell back to a centroid fan "
                         "(non-simple loop projection)")
            tris.extend((k, idx[a], idx[(a + 1) % len(idx)])
                        for a in range(len(idx)))
            return tris, True
        diag = np.linalg.norm(Cn - A, axis=1)
        best = int(np.flatnonzero(valid)[np.argmin(diag[valid])])
        tris.append((idx[(best - 1) % m], idx[best], idx[(best + 1) % m]))
        del idx[best]
    tris.append((idx[0], idx[1], idx[2]))
    return tris, False


def _zone_levels(alpha_deg: float) -> list[float]:
    """Polar angles (deg) of the roof rings, from the wall rim down to 0."""
    levels = [alpha_deg]
    step = _ZONE_STEP_DEG
    g = np.floor((alpha_deg - 1e-9) / step) * step
    while g > 0:
        levels.append(g)
        g -= step
    levels.append(0.0)
    return levels


def sweep_envelope(sub: SubGraph, cone: NozzleCone,
                   samples: int | None = None) -> EnvelopeVolume:
    """Closed swept-cone volume over every boundary loop of the sub-graph.

    Wall strips follow the cone slant from the loop; spherical-zone strips
    and a lifted ceiling close the top so the volume approximates the cone
    swept over the whole sub-graph region; the base loop is capped below.
    Loops with fewer than 3 vertices are skipped.
    """
    all_verts: list[np.ndarray] = []
    all_tris: list[np.ndarray] = []
    offset = 0
    for loop in boundary_loops(sub):
        if len(loop["positions"]) < 3:
            logger.warning("skipping boundary loop with < 3 vertices")
            continue
        st = _stations(loop, cone, samples)
        base_ids = st["base_ids"]
        k_base = st["n_base"]
        s = len(base_ids)
        rings = [_ring(st, cone.length, np.radians(th))
                 for th in _zone_levels(cone.alpha_deg)]
        verts = np.vstack([st["base_pos"]] + rings)
        ring_start = [k_base + r * s for r in range(len(rings))]

        tris: list[tuple[int, int, int]] = []
        # wall: base loop up to the widest (rim) ring
        r0 = ring_start[0]
        for i in range(s):
            j = (i + 1) % s
            b0, b1 = int(base_ids[i]), int(base_ids[j])
            t0, t1 = r0 + i, r0 + j
            if b0 != b1:
                tris.append((b0, b1, t1))
            tris.append((b0, t1, t0))
        # spherical-zone strips between consecutive rings
        for r in range(len(rings) - 1):
            lo, hi = ring_start[r], ring_start[r + 1]
            for i in range(s):
                j = (i + 1) % s
                tris.append((lo + i, lo + j, hi + j))
                tris.append((lo + i, hi + j, hi + i))
        # caps: bottom on the base loop (reversed so its boundary opposes the
        # wall's bottom edges and it faces outward/down), ceiling on the
        # innermost ring (loop order opposes the last strip's rim edges)
        n_mean = st["normal_mean"] / max(np.linalg.norm(st["normal_mean"]), 1e-300)
        extra: list[np.ndarray] = []
        cap, used = _cap_loop(verts[:k_base], n_mean)
        cen = len(verts) + len(extra)
        if used:
            extra.append(verts[:k_base].mean(axis=0))
        for (a, b, c) in cap:
            tris.append((cen if a == k_base else a,
                         cen if c == k_base else c,
                         cen if b == k_base else b))
        top = ring_start[-1]
        ring_pts = verts[top:top + s]
        cap, used = _cap_loop(ring_pts, n_mean)
        cen = len(verts) + len(extra)
        if used:
            extra.append(ring_pts.mean(axis=0))
        for (a, b, c) in cap:
            tris.append((cen if a == s else top + a,
                         cen if b == s else top + b,
                         cen if c == s else top + c))
        if extra:
            verts = np.vstack([verts, np.asarray(extra)])
        all_verts.append(verts)
        all_tris.append(np.array(tris, dtype=np.int64) + offset)
        offset += len(verts)
    if not all_verts:
        return EnvelopeVolume(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return EnvelopeVolume(np.vstack(all_verts), np.vstack(all_tris))


# ---------------------------------------------------------------------------
# Intersection machinery (exact, against the envelope mesh)


def _cross_bc(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Broadcasting cross product without numpy.cross's dispatch overhead."""
    out = np.empty(np.broadcast_shapes(x.shape, y.shape))
    out[..., 0] = x[..., 1] * y[..., 2] - x[..., 2] * y[..., 1]
    out[..., 1] = x[..., 2] * y[..., 0] - x[..., 0] * y[..., 2]
    out[..., 2] = x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]
    return out


def _mt_kernel(p: np.ndarray, d: np.ndarray,
               tri: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray,
                                         np.ndarray, np.ndarray]:
    """Raw Moller-Trumbore quantities for one block: (ok, u, v, t, det).

    The determinant equals -d.(e1 x e2): positive where the direction runs
    against the triangle's outward normal (an entry into the volume).
    """
    A = tri[:, 0]
    e1 = tri[:, 1] - A
    e2 = tri[:, 2] - A
    h = _cross_bc(d[:, None, :], e2[None, :, :])         # (E, T, 3)
    a = np.einsum("tj,etj->et", e1, h)
    ok = np.abs(a) > _MT_EPS
    f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = p[:, None, :] - A[None, :, :]
    u = f * np.einsum("etj,etj->et", s, h)
    q = _cross_bc(s, e1[None, :, :])
    v = f * np.einsum("ej,etj->et", d, q)
    t = f * np.einsum("tj,etj->et", e2, q)
    return ok, u, v, t, a


def _segment_triangle_params(p: np.ndarray, d: np.ndarray,
                             tri: np.ndarray) -> tuple[np.ndarray, np.ndarray,
                                                       np.ndarray]:
    """Batch Moller-Trumbore: hit parameters of segments against triangles.

    ``p``/``d``: (E, 3) segment origins and full-length directions;
    ``tri``: (T, 3, 3).  Returns an (E, T) boolean hit mask (t in (0, 1)),
    (E, T) t parameters (junk where not hit), and (E, T) crossing signs:
    +1 where the segment enters the enclosed volume through the triangle
    (direction against the outward normal), -1 where it exits.  Processed
    in blocks to keep the (block, T, 3) intermediates small.
    """
    E, T = len(p), len(tri)
    hit = np.zeros((E, T), dtype=bool)
    tpar = np.zeros((E, T))
    sgn = np.zeros((E, T))
    for a in range(0, E, _CHUNK):
        b = min(a + _CHUNK, E)
        ok, u, v, t, det = _mt_kernel(p[a:b], d[a:b], tri)
        hit[a:b] = (ok & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9)
                    & (t > 1e-9) & (t < 1 - 1e-9))
        tpar[a:b] = t
        sgn[a:b] = np.sign(det)
    return hit, tpar, sgn


_RAY_DIRS = np.array([
    [0.57735026, 0.57735027, 0.57735028],
    [-0.30151134, 0.90453403, 0.30151134],
    [0.80178373, -0.26726124, 0.53452248],
    [-0.53452248, -0.80178373, 0.26726124],
    [0.26726124, 0.53452248, -0.80178373],
])


def points_inside(points: np.ndarray, env: EnvelopeVolume) -> np.ndarray:
    """Ray-parity containment for a batch of points.

    Casts along a fixed direction; points whose ray grazes a triangle edge
    are re-tested with alternate directions (majority of 5).
    """
    if env.n_tris == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    tri = env.triangle_corners()
    far = 4.0 * float(np.abs(env.vertices).max() + np.abs(points).max() + 1.0)
    votes = np.zeros(len(points), dtype=np.int64)
    result = np.zeros(len(points), dtype=bool)
    remaining = np.arange(len(points))
    for d0 in _RAY_DIRS:
        if not len(remaining):
            break
        counts = np.zeros(len(remaining), dtype=np.int64)
        grazed = np.zeros(len(remaining), dtype=bool)
        for a in range(0, len(remaining), _CHUNK):
            b = min(a + _CHUNK, len(remaining))
            p = points[remaining[a:b]]
            d = np.tile(d0 * far, (len(p), 1))
            ok, u, v, t, _ = _mt_kernel(p, d, tri)
            inside_tri = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
            graze = ok & (t > 1e-12) & (
                ((np.abs(u) < 1e-9) | (np.abs(v) < 1e-9)
                 | (np.abs(1 - u - v) < 1e-9))
                & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9))
            counts[a:b] = inside_tri.sum(axis=1)
            grazed[a:b] = graze.any(axis=1)
        clean = ~grazed
        newly = remaining[clean]
        result[newly] = (counts[clean] % 2) == 1
        votes[remaining] += (counts % 2)
        remaining = remaining[~clean]
    if len(remaining):
        result[remaining] = votes[remaining] > len(_RAY_DIRS) / 2
    return result


def _point_surface_distance(points: np.ndarray, env: EnvelopeVolume) -> np.ndarray:
    """Exact distance from each point to the envelope triangle mesh.

    Closest point on each triangle via barycentric Voronoi regions; later
    region overrides win, so vertex regions take final precedence.
    """
    tri = env.triangle_corners()
    A, B, C = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, bc = B - A, C - A, C - B
    abA = np.einsum("tj,tj->t", ab, A)
    acA = np.einsum("tj,tj->t", ac, A)
    abB = np.einsum("tj,tj->t", ab, B)
    acB = np.einsum("tj,tj->t", ac, B)
    abC = np.einsum("tj,tj->t", ab, C)
    acC = np.einsum("tj,tj->t", ac, C)
    best = np.full(len(points), np.inf)
    for a0 in range(0, len(points), 64):
        p = points[a0:a0 + 64]
        pab = p @ ab.T
        pac = p @ ac.T
        d1 = pab - abA[None, :]
        d2 = pac - acA[None, :]
        d3 = pab - abB[None, :]
        d4 = pac - acB[None, :]
        d5 = pab - abC[None, :]
        d6 = pac - acC[None, :]
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
        v = vb / safe
        w = vc / safe
        closest = A[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        tt = (d4 - d3) / np.maximum((d4 - d3) + (d5 - d6), 1e-300)
        closest = np.where(m[..., None], B[None] + tt[..., None] * bc[None],
                           closest)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        tt = d2 / np.maximum(d2 - d6, 1e-300)
        closest = np.where(m[..., None], A[None] + tt[..., None] * ac[None],
                           closest)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        tt = d1 / np.maximum(d1 - d3, 1e-300)
        closest = np.where(m[..., None], A[None] + tt[..., None] * ab[None],
                           closest)
        closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], C[None], closest)
        closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], B[None], closest)
        closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], A[None], closest)
        diff = p[:, None, :] - closest
        best[a0:a0 + 64] = np.sqrt((diff * diff).sum(axis=2).min(axis=1))
    return best


def _any_deeper(points: np.ndarray, env: EnvelopeVolume,
                clearance: float) -> bool:
    """Whether any point lies farther than ``clearance`` from the surface.

    A point with no triangle bounding box within ``clearance`` qualifies
    outright; the rest get exact distances against their nearby triangles
    (triangles pruned away are provably farther than ``clearance``, so the
    pruned minimum decides correctly either way).
    """
    if not len(points) or env.n_tris == 0:
        return False
    tri = env.triangle_corners()
    tlo = tri.min(axis=1)
    thi = tri.max(axis=1)
    c2 = clearance * clearance
    for a0 in range(0, len(points), 64):
        p = points[a0:a0 + 64]
        gap = np.maximum(np.maximum(tlo[None] - p[:, None],
                                    p[:, None] - thi[None]), 0.0)
        near = (gap * gap).sum(axis=2) <= c2
        has_near = near.any(axis=1)
        if (~has_near).any():
            return True
        if has_near.any():
            # one batched call against the union of near triangles; pruned
            # triangles are beyond clearance for every point in the chunk,
            # so they cannot change any point's side of the threshold
            sub_env = EnvelopeVolume(
                env.vertices, env.tris[np.flatnonzero(near.any(axis=0))])
            if (_point_surface_distance(p[has_near], sub_env)
                    > clearance).any():
                return True
    return False


def collision_check(sub_i: SubGraph, sub_j: SubGraph, env_i: EnvelopeVolume,
                    clearance: float = DEFAULT_CLEARANCE) -> bool:
    """Whether sub-graph ``j`` intrudes into sub-graph ``i``'s envelope.

    True when a vertex of ``j`` sits inside the envelope deeper than
    ``clearance``, or an edge of ``j`` crosses the envelope with an inside
    chord whose midpoint is deeper than ``clearance`` (depth along a chord
    grows at most linearly from its end crossings, so chords shorter than
    ``2 * clearance`` can never qualify and are skipped outright).
    """
    if env_i.n_tris == 0 or sub_j.n_vertices == 0:
        return False
    pos = sub_j.graph.positions
    pts = pos[sub_j.vertex_ids]
    lo, hi = env_i.bbox()
    pad = 1e-9
    if ((pts < lo - pad).all(axis=0).any() or (pts > hi + pad).all(axis=0).any()):
        return False
    inside = np.zeros(len(pts), dtype=bool)
    for a0 in range(0, len(pts), 64):
        ins = points_inside(pts[a0:a0 + 64], env_i)
        inside[a0:a0 + 64] = ins
        if ins.any() and _any_deeper(pts[a0:a0 + 64][ins], env_i, clearance):
            return True
    edges = sub_j.graph.edges[sub_j.edge_ids]
    p = pos[edges[:, 0]]
    q = pos[edges[:, 1]]
    keep = ~(((p < lo - pad) & (q < lo - pad)).any(axis=1)
             | ((p > hi + pad) & (q > hi + pad)).any(axis=1))
    if not keep.any():
        return False
    start_in = inside[np.searchsorted(sub_j.vertex_ids, edges[keep, 0])]
    p, q = p[keep], q[keep]
    d = q - p
    hit, t, sgn = _segment_triangle_params(p, d, env_i.triangle_corners())
    seg_len = np.linalg.norm(d, axis=1)
    mids = []
    for e in np.flatnonzero(hit.any(axis=1)):
        ts = t[e][hit[e]]
        ss = sgn[e][hit[e]]
        order = np.argsort(ts)
        ts, ss = ts[order], ss[order]
        # merge crossings at equal parameters: a pass through a shared
        # triangle edge reports twice with one sign (one real crossing),
        # a tangent graze reports twice with opposing signs (no crossing)
        gt: list = []
        gs: list = []
        for tv, sv in zip(ts, ss):
            if gt and tv - gt[-1] < 1e-7:
                gs[-1] += sv
            else:
                gt.append(float(tv))
                gs.append(float(sv))
        # walk the crossing groups, collecting long inside chords
        state = bool(start_in[e])
        prev = 0.0
        for tv, sv in zip(gt + [1.0], gs + [0.0]):
            if state and (tv - prev) * seg_len[e] > 2.0 * clearance:
                mids.append(p[e] + 0.5 * (prev + tv) * d[e])
            if sv > 0:
                state = True
            elif sv < 0:
                state = False
            prev = tv
    if mids:
        mids = np.asarray(mids)
        deep = points_inside(mids, env_i)
        if deep.any() and _any_deeper(mids[deep], env_i, clearance):
            return True
    return False


# ---------------------------------------------------------------------------
# Fast analytic pair classifier
#
# The envelope is, up to faceting, the boundary of the union of solid
# nozzle cones planted over the sub-graph region.  Three rigorous screens
# decide most ordered pairs without touching the mesh:
#
# * ordering: the envelope lies on/above its own layer's iso-surface and
#   below iso + nozzle length, so candidates entirely below the layer or
#   above the ceiling cannot intrude (the slicing field's gradient is
#   calibrated near 1, with generous slack for its residual error);
# * reject side: a sample far from every vertex-planted solid cone is
#   outside the swept union, because the graph vertices cover the region
#   within a known radius;
# * accept side: a vertex deep inside a rim-station cone, or hovering over
#   the footprint polygon well clear of the rim, the layer below, and the
#   lifted ceiling, is deep inside the envelope.  Accepts are switched off
#   when the layer normals spread so widely that the swept wall can fold
#   over itself — the even-odd solid of a folded envelope may exclude
#   pockets the geometric sweep covers — so those rare sub-graphs are
#   decided purely by the mesh tests.
#
# Pairs left in the uncertainty bands fall back to the exact mesh tests.
# The band constants were validated by exhaustive comparison against the
# pure-mesh decision on the example parts across the nozzle-angle range.

_BAND_TRUE = 1.5     # mm: station-cone vs faceted-wall slack, accept side
_BAND_FALSE = 1.5    # mm: extra slack on the reject side (plus covering radii)
_PRISM_PAD = 0.8     # mm: flat safety margin on the overhead-prism bound
_GRAD_SLACK = 1.15   # worst-case |gradient| of the calibrated slicing field
_FOLD_DEG = 30.0     # layer-normal spread that disables analytic accepts


def _query_samples(sub: SubGraph, max_gap: float = 1.5) -> np.ndarray:
    """Vertices plus enough points along each edge to bound sample gaps."""
    pos = sub.graph.positions
    pts = [pos[sub.vertex_ids]]
    if sub.n_edges:
        edges = sub.graph.edges[sub.edge_ids]
        p, q = pos[edges[:, 0]], pos[edges[:, 1]]
        lens = np.linalg.norm(q - p, axis=1)
        nseg = np.maximum(np.ceil(lens / max_gap).astype(int), 1)
        for n in np.unique(nseg):
            if n == 1:
                continue
            sel = nseg == n
            for m in range(1, int(n)):
                pts.append(p[sel] + (m / n) * (q[sel] - p[sel]))
    return np.vstack(pts)


def _envelope_proxy(sub: SubGraph, cone: NozzleCone) -> dict | None:
    """Analytic stand-ins for one envelope's accept-side tests.

    Returns rim-station cones (apexes + axes), the mean-normal frame, the
    2D footprint segments of all loops in that frame, the lowest lifted
    ceiling height ``c_lo`` along the mean normal, and the fold status.
    """
    loops = [lp for lp in boundary_loops(sub) if len(lp["positions"]) >= 3]
    if not loops:
        return None
    sts = [_stations(lp, cone, None) for lp in loops]
    apex = np.vstack([st["bases"] for st in sts])
    axis = np.vstack([st["n"] for st in sts])
    mean = axis.sum(axis=0)
    nrm = float(np.linalg.norm(mean))
    if nrm < 1e-12:
        return None
    a_hat = mean / nrm
    tilt = float(np.degrees(np.arccos(np.clip(axis @ a_hat, -1.0, 1.0)).max()))
    ref = np.array([0.0, 0.0, 1.0]) if abs(a_hat[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(a_hat, ref)
    t1 /= np.linalg.norm(t1)
    frame = np.column_stack([t1, np.cross(a_hat, t1)])
    seg_p, seg_q = [], []
    for lp in loops:
        xy = lp["positions"] @ frame
        seg_p.append(xy)
        seg_q.append(np.roll(xy, -1, axis=0))
    reach = cone.length * (np.sin(np.radians(cone.alpha_deg))
                           + np.sin(np.radians(min(tilt, 90.0)))) + 1.0
    return {
        "apex": apex, "axis": axis, "a": a_hat, "frame": frame,
        "seg_p": np.vstack(seg_p), "seg_q": np.vstack(seg_q),
        "c_lo": float(((apex + cone.length * axis) @ a_hat).min()),
        "iso": float(sub.graph.iso),
        "folded": tilt > _FOLD_DEG,
        "kappa": max(0.0, float(np.cos(np.radians(2.0 * tilt)))),
        "reach": float(reach),
    }


def _footprint_margins(xy: np.ndarray, seg_p: np.ndarray,
                       seg_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Even-odd insideness and unsigned rim distance of 2D points.

    Crossing parity over all loop segments (so holes flip parity) plus the
    distance to the nearest segment.
    """
    d = seg_q - seg_p
    px, py = xy[:, 0][:, None], xy[:, 1][:, None]
    sy, qy = seg_p[None, :, 1], seg_q[None, :, 1]
    dy = np.where(np.abs(d[:, 1]) < 1e-30, 1e-30, d[:, 1])[None, :]
    crosses = (sy > py) != (qy > py)
    tx = seg_p[None, :, 0] + (py - sy) / dy * d[None, :, 0]
    inside = ((crosses & (px < tx)).sum(axis=1) & 1).astype(bool)
    rel = xy[:, None, :] - seg_p[None, :, :]
    t = np.clip(np.einsum("qmj,mj->qm", rel, d)
                / np.maximum((d * d).sum(axis=1), 1e-30)[None, :], 0.0, 1.0)
    close = seg_p[None, :, :] + t[..., None] * d[None, :, :]
    dist = np.linalg.norm(xy[:, None, :] - close, axis=2).min(axis=1)
    return inside, dist


def _station_depth(q: np.ndarray, apex: np.ndarray, axis: np.ndarray,
                   alpha: float, length: float,
                   stop_above: float = np.inf) -> float:
    """Deepest inside margin of any query in any rim-station solid cone.

    Inside depth of one query in one cone is min(L - r, r*sin(alpha-theta));
    the scan stops once a chunk exceeds ``stop_above``.
    """
    best = -np.inf
    for a0 in range(0, len(q), 512):
        diff = q[a0:a0 + 512, None, :] - apex[None, :, :]
        r = np.linalg.norm(diff, axis=2)
        rs = np.maximum(r, 1e-300)
        theta = np.arccos(np.clip(
            np.einsum("qpj,pj->qp", diff, axis) / rs, -1.0, 1.0))
        depth = np.where((theta <= alpha) & (r <= length),
                         np.minimum(length - r, r * np.sin(alpha - theta)),
                         -np.inf)
        best = max(best, float(depth.max(initial=-np.inf)))
        if best > stop_above:
            break
    return best


def _prism_margins(q: np.ndarray, n_vert: int, proxy: dict,
                   iso_j: float) -> tuple[float, float]:
    """(deepest overhead margin of a vertex, smallest footprint excess).

    Depth side (first ``n_vert`` rows are graph vertices): for a vertex
    whose footprint lies inside the loop polygon, depth into the envelope
    is bounded below by the least of the tilt-damped rim distance, the
    iso-difference above the layer (scaled by the worst-case field
    gradient), and the headroom under the lifted ceiling.

    Reject side (all rows): every envelope point's footprint stays within
    ``reach`` of the loop polygon, so a sample whose footprint distance
    exceeds reach is outside the envelope by at least the excess.
    """
    xy = q @ proxy["frame"]
    inside, lat = _footprint_margins(xy, proxy["seg_p"], proxy["seg_q"])
    out = float(np.where(inside, 0.0, lat - proxy["reach"]).min(
        initial=np.inf))
    kappa = proxy["kappa"]
    if kappa <= 0.0 or not inside[:n_vert].any():
        return -np.inf, out
    d_bot = (iso_j - proxy["iso"]) / _GRAD_SLACK
    d_ceil = proxy["c_lo"] - q[:n_vert] @ proxy["a"]
    depth = np.minimum(np.minimum(lat[:n_vert] * kappa, d_ceil), d_bot) \
        - _PRISM_PAD
    return float(np.where(inside[:n_vert], depth, -np.inf).max(
        initial=-np.inf)), out


def _cone_outside(q: np.ndarray, apex: np.ndarray, axis: np.ndarray,
                  alpha: float, length: float,
                  stop_below: float = -np.inf) -> float:
    """Smallest outside-distance bound from any sample to the cone union.

    Distance of one query from one solid cone is bounded below by
    max(r - L, r*sin(min(theta-alpha, 90deg))); the union takes the min
    over apexes, the reject decision the min over queries.  The scan stops
    once a chunk's minimum falls below ``stop_below``.
    """
    worst = np.inf
    for a0 in range(0, len(q), 512):
        diff = q[a0:a0 + 512, None, :] - apex[None, :, :]
        r = np.linalg.norm(diff, axis=2)
        rs = np.maximum(r, 1e-300)
        theta = np.arccos(np.clip(
            np.einsum("qpj,pj->qp", diff, axis) / rs, -1.0, 1.0))
        d_ang = np.where(theta > alpha,
                         r * np.sin(np.minimum(theta - alpha, np.pi / 2)), 0.0)
        out = np.where((theta <= alpha) & (r <= length), 0.0,
                       np.maximum(d_ang, np.maximum(r - length, 0.0)))
        if len(out):
            worst = min(worst, float(out.min(axis=1).min()))
        if worst < stop_below:
            break
    return worst


def compute_pcgs(subs: list[SubGraph], cone: NozzleCone,
                 clearance: float = DEFAULT_CLEARANCE,
                 threads: int = 1) -> dict:
    """PCG list for every sub-graph: who must not be printed before me.

    Returns ``{key: sorted list of keys}`` where ``key`` is the sub-graph's
    (layer, component) identifier; ``j in pcgs[i]`` means sub-graph ``j``
    reaches into ``i``'s nozzle envelope, so printing ``j`` before ``i``
    risks a toolhead collision while ``i`` is printed.  Every ordered pair
    is considered; the analytic screens short-circuit pairs far from the
    decision boundary, the mesh tests decide the rest.
    """
    alpha = np.radians(cone.alpha_deg)
    envs: dict = {}
    proxies: dict = {}
    vpts: dict = {}
    vaxes: dict = {}
    qpts: dict = {}
    nv: dict = {}
    cover: dict = {}
    iso_of: dict = {}
    lo_s: dict = {}
    hi_s: dict = {}

    def prep(s: SubGraph):
        envs[s.key] = sweep_envelope(s, cone)
        proxies[s.key] = _envelope_proxy(s, cone)
        p = s.positions()
        vpts[s.key] = p
        n = s.graph.normals[s.vertex_ids]
        vaxes[s.key] = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True),
                                      1e-300)
        qpts[s.key] = _query_samples(s)
        nv[s.key] = len(p)
        lens = s.graph.edge_lengths()[s.edge_ids] if s.n_edges else np.zeros(1)
        cover[s.key] = 0.75 * float(lens.max(initial=0.0))
        iso_of[s.key] = float(s.graph.iso)
        lo_s[s.key] = p.min(axis=0)
        hi_s[s.key] = p.max(axis=0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(prep, subs))
    else:
        for s in subs:
            prep(s)

    def pcg_of(si: SubGraph) -> tuple:
        env = envs[si.key]
        prx = proxies[si.key]
        found = []
        if env.n_tris:
            lo, hi = env.bbox()
            for sj in subs:
                if sj.key == si.key:
                    continue
                d_iso = iso_of[sj.key] - iso_of[si.key]
                if (d_iso < -(clearance + _BAND_FALSE)
                        or d_iso > _GRAD_SLACK * cone.length + clearance
                        + _BAND_FALSE):
                    continue
                if ((hi_s[sj.key] < lo).any() or (lo_s[sj.key] > hi).any()):
                    continue
                hit = False
                undecided = True
                if prx is not None:
                    depth_p, out_p = _prism_margins(
                        qpts[sj.key], nv[sj.key], prx, iso_of[sj.key])
                    if not prx["folded"] and depth_p > clearance:
                        hit, undecided = True, False
                    elif out_p > _BAND_FALSE:
                        undecided = False
                    elif not prx["folded"] and _station_depth(
                            vpts[sj.key], prx["apex"], prx["axis"], alpha,
                            cone.length, clearance + _BAND_TRUE) \
                            > clearance + _BAND_TRUE:
                        hit, undecided = True, False
                if undecided:
                    if _cone_outside(qpts[sj.key], vpts[si.key],
                                     vaxes[si.key], alpha, cone.length,
                                     cover[si.key] + _BAND_FALSE) \
                            > cover[si.key] + _BAND_FALSE:
                        continue
                    hit = collision_check(si, sj, env, clearance)
                if hit:
                    found.append(sj.key)
        return si.key, sorted(found)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return dict(pool.map(pcg_of, subs))
    return dict(map(pcg_of, subs))


# ---------------------------------------------------------------------------
# PLY export


def write_envelope_ply(path: str | Path, env: EnvelopeVolume) -> None:
    """ASCII PLY dump of one envelope for visual inspection."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(env.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {env.n_tris}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in env.vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in env.tris:
            fh.write(f"3 {int(t[0])} {int(t[1])} {int(t[2])}\n")
