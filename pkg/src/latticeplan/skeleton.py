"""Sub-graph decomposition and the printing partial order.

Each curved layer's lattice graph splits into connected components, called
sub-graphs.  Sub-graphs of consecutive layers are linked when material
connects them; directing every link from the lower to the higher slicing
iso-value yields a forest whose roots sit on the build plate.  A sub-graph
may only be printed once at least one sub-graph directly below it is in
place, so this forest is the partial order every print sequence must
respect.

Adjacency between two sub-graphs is decided two ways and cross-checked:

* a steepest ascent/descent trace of the slicing field over the boundary
  surface, started from every point where the sub-graph's lattice isolines
  meet the surface, succeeding when the trace crosses the other layer's
  iso-value on a surface triangle that carries the other sub-graph's
  boundary chain;
* a material-connectivity check: the tets whose slicing-field range touches
  the band between the two iso-values are grouped into face-connected
  blocks, and the sub-graphs are adjacent exactly when one block hosts
  geometry of both.

The connectivity check is authoritative (surface traces can stall on
ridges); disagreements are logged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

from .slicing import (EDGE_BOUNDARY, HOST_FACE, LayerGraph, U_ISO, V_ISO,
                      boundary_loops)
from .tetmesh import SurfaceMesh, TetMesh, extract_boundary

logger = logging.getLogger(__name__)

_MAX_TRACE_STEPS = 100_000
_STEP_EPS = 1e-9          # minimal advance along a trace ray
_GRAD_EPS = 1e-12         # below this the surface gradient counts as a stall


class SkeletonError(RuntimeError):
    """Raised when the layer stack cannot form a printable partial order."""


# ---------------------------------------------------------------------------
# Sub-graphs


@dataclass
class SubGraph:
    """One connected component of a layer's lattice graph."""
    layer: int                 # position in the sliced-layer list
    index: int                 # component index within the layer
    iso: float                 # the layer's slicing iso-value
    graph: LayerGraph          # parent graph; ids below index into it
    vertex_ids: np.ndarray     # (n,) parent vertex ids, sorted
    edge_ids: np.ndarray       # (m,) parent edge ids, sorted
    centroid: np.ndarray       # (3,) mean vertex position
    loops: list = field(default_factory=list)  # boundary loops (parent ids)

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer, self.index)

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    def positions(self) -> np.ndarray:
        return self.graph.positions[self.vertex_ids]

    def host_tets(self, mesh: TetMesh) -> np.ndarray:
        """Tets hosting this sub-graph's edges (boundary faces resolved)."""
        kinds = self.graph.edge_kinds[self.edge_ids]
        hosts = self.graph.edge_hosts[self.edge_ids]
        onb = kinds == EDGE_BOUNDARY
        tets = np.concatenate([hosts[~onb], mesh.face_tets[hosts[onb], 0]])
        return np.unique(tets)

    def boundary_faces(self) -> np.ndarray:
        """Boundary-face ids carrying this sub-graph's boundary chain."""
        kinds = self.graph.edge_kinds[self.edge_ids]
        return np.unique(self.graph.edge_hosts[self.edge_ids][kinds == EDGE_BOUNDARY])

    def surface_anchors(self) -> tuple[np.ndarray, np.ndarray]:
        """(face ids, positions) where lattice isolines meet the surface."""
        k = self.graph.kinds[self.vertex_ids]
        sel = ((k == U_ISO) | (k == V_ISO)) & self.graph.on_boundary[self.vertex_ids]
        ids = self.vertex_ids[sel]
        ok = self.graph.host_kinds[ids] == HOST_FACE
        ids = ids[ok]
        return self.graph.host_ids[ids], self.graph.positions[ids]


def connected_components(graph: LayerGraph) -> list[SubGraph]:
    """Split one layer graph into its connected sub-graphs.

    Components are ordered by their lexicographically smallest vertex
    position, so the result does not depend on the input mesh's vertex
    numbering.
    """
    n = graph.n_vertices
    if n == 0:
        return []
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    adj = sp.coo_matrix((np.ones(2 * len(a), dtype=np.int8),
                         (np.r_[a, b], np.r_[b, a])), shape=(n, n)).tocsr()
    n_comp, label = _cc(adj, directed=False)

    def lex_min(c: int) -> tuple:
        pos = graph.positions[label == c]
        return tuple(pos[np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))][0].round(9))

    order = sorted(range(n_comp), key=lex_min)
    loops = boundary_loops(graph)
    comps = []
    for new_idx, c in enumerate(order):
        vids = np.flatnonzero(label == c)
        eids = np.flatnonzero(label[a] == c)
        comp_loops = [lp for lp in loops if label[lp[0]] == c]
        comps.append(SubGraph(graph.layer, new_idx, float(graph.iso), graph,
                              vids, eids, graph.positions[vids].mean(axis=0),
                              comp_loops))
    return comps


# ---------------------------------------------------------------------------
# Surface steepest traces


class SurfaceTracer:
    """Steepest ascent/descent of a vertex field across boundary triangles.

    Each step moves in-plane along the triangle's linear-field gradient to
    the triangle's edge, then crosses into the neighbor if the neighbor's
    gradient points inward; otherwise the trace stalls (ridge/critical
    point), which callers treat as "not reached".
    """

    def __init__(self, mesh: TetMesh, surface: SurfaceMesh,
                 values: np.ndarray):
        self.surface = surface
        P = mesh.vertices[surface.tris]          # (B, 3, 3)
        self.vals = values[surface.tris]         # (B, 3)
        self.nb = surface.neighbors
        e1 = P[:, 1] - P[:, 0]
        e2 = P[:, 2] - P[:, 0]
        nrm = surface.normals
        t1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
        t2 = np.cross(nrm, t1)
        self.origin = P[:, 0]
        self.t1, self.t2 = t1, t2
        # 2D corner coordinates in the (t1, t2) frame
        self.c2 = np.zeros((len(P), 3, 2))
        self.c2[:, 1, 0] = np.einsum("ij,ij->i", e1, t1)
        self.c2[:, 2, 0] = np.einsum("ij,ij->i", e2, t1)
        self.c2[:, 2, 1] = np.einsum("ij,ij->i", e2, t2)
        self.P = P
        # in-plane gradient of the linear interpolant, in 2D frame coords
        b2, c2 = self.c2[:, 1], self.c2[:, 2]
        det = b2[:, 0] * c2[:, 1] - b2[:, 1] * c2[:, 0]
        d1 = self.vals[:, 1] - self.vals[:, 0]
        d2 = self.vals[:, 2] - self.vals[:, 0]
        gx = (d1 * c2[:, 1] - d2 * b2[:, 1]) / det
        gy = (d2 * b2[:, 0] - d1 * c2[:, 0]) / det
        self.g2 = np.column_stack([gx, gy])
        self.face_to_tri = np.full(mesh.n_faces, -1, dtype=np.int64)
        self.face_to_tri[surface.face_ids] = np.arange(surface.n_tris)

    def _project(self, tri: int, p3: np.ndarray) -> np.ndarray:
        d = p3 - self.origin[tri]
        return np.array([d @ self.t1[tri], d @ self.t2[tri]])

    def _value_at(self, tri: int, p2: np.ndarray) -> float:
        b2, c2 = self.c2[tri, 1], self.c2[tri, 2]
        det = b2[0] * c2[1] - b2[1] * c2[0]
        w1 = (p2[0] * c2[1] - p2[1] * c2[0]) / det
        w2 = (b2[0] * p2[1] - b2[1] * p2[0]) / det
        v = self.vals[tri]
        return float(v[0] + w1 * (v[1] - v[0]) + w2 * (v[2] - v[0]))

    def trace(self, tri: int, point: np.ndarray, target: float,
              ascending: bool) -> int:
        """Follow the field until it crosses ``target``.

        Returns the triangle index where the crossing happens, or -1 when the
        trace stalls, leaves the surface, or exceeds the step budget.
        """
        sign = 1.0 if ascending else -1.0
        tgt = sign * target
        p2 = self._project(tri, np.asarray(point, dtype=float))
        if sign * self._value_at(tri, p2) >= tgt - 1e-12:
            return tri
        for _ in range(_MAX_TRACE_STEPS):
            d2 = sign * self.g2[tri]
            if np.hypot(d2[0], d2[1]) < _GRAD_EPS:
                return -1
            exit_edge, exit_r, exit_s = -1, 0.0, np.inf
            for k in range(3):
                a2 = self.c2[tri, (k + 1) % 3]
                b2 = self.c2[tri, (k + 2) % 3]
                e = b2 - a2
                det = d2[0] * (-e[1]) - d2[1] * (-e[0])
                if abs(det) < 1e-300:
                    continue
                rhs = a2 - p2
                s = (rhs[0] * (-e[1]) - rhs[1] * (-e[0])) / det
                r = (d2[0] * rhs[1] - d2[1] * rhs[0]) / det
                if s > _STEP_EPS and -1e-9 <= r <= 1 + 1e-9 and s < exit_s:
                    exit_edge, exit_r, exit_s = k, min(max(r, 0.0), 1.0), s
            if exit_edge < 0:
                return -1
            q2 = p2 + exit_s * d2
            if sign * self._value_at(tri, q2) >= tgt - 1e-12:
                return tri
            nxt = int(self.nb[tri, exit_edge])
            if nxt < 0:
                return -1
            pa = self.P[tri, (exit_edge + 1) % 3]
            pb = self.P[tri, (exit_edge + 2) % 3]
            p3 = pa + exit_r * (pb - pa)
            # inward-gradient gate on the neighbor
            k2 = int(np.flatnonzero(self.nb[nxt] == tri)[0])
            a2 = self.c2[nxt, (k2 + 1) % 3]
            b2 = self.c2[nxt, (k2 + 2) % 3]
            c2 = self.c2[nxt, k2]
            e = b2 - a2
            m = np.array([-e[1], e[0]])
            if m @ (c2 - a2) < 0:
                m = -m
            if (sign * self.g2[nxt]) @ m <= 0:
                return -1
            tri = nxt
            p2 = self._project(tri, p3)
        return -1


# ---------------------------------------------------------------------------
# Adjacency: surface traces + material-band connectivity


def _face_owner_map(comps: list[SubGraph]) -> dict[int, list[int]]:
    owners: dict[int, list[int]] = {}
    for c in comps:
        for f in c.boundary_faces():
            owners.setdefault(int(f), []).append(c.index)
    return owners


def trace_links(tracer: SurfaceTracer, lower: list[SubGraph],
                upper: list[SubGraph]) -> set[tuple[int, int]]:
    """Sub-graph links found by surface steepest ascent/descent traces."""
    links: set[tuple[int, int]] = set()
    if not lower or not upper:
        return links
    up_owner = _face_owner_map(upper)
    lo_owner = _face_owner_map(lower)
    iso_lo, iso_hi = lower[0].iso, upper[0].iso
    for a in lower:
        faces, pts = a.surface_anchors()
        for f, p in zip(faces, pts):
            tri = int(tracer.face_to_tri[f])
            if tri < 0:
                continue
            hit = tracer.trace(tri, p, iso_hi, ascending=True)
            if hit >= 0:
                for k in up_owner.get(int(tracer.surface.face_ids[hit]), []):
                    links.add((a.index, k))
    for b in upper:
        faces, pts = b.surface_anchors()
        for f, p in zip(faces, pts):
            tri = int(tracer.face_to_tri[f])
            if tri < 0:
                continue
            hit = tracer.trace(tri, p, iso_lo, ascending=False)
            if hit >= 0:
                for j in lo_owner.get(int(tracer.surface.face_ids[hit]), []):
                    links.add((j, b.index))
    return links


def band_links(mesh: TetMesh, gamma: np.ndarray, lower: list[SubGraph],
               upper: list[SubGraph]) -> set[tuple[int, int]]:
    """Sub-graph links by connectivity of the material between the layers.

    Tets whose field range touches [iso_lo, iso_hi] are grouped into
    face-connected blocks; a lower and an upper sub-graph are linked when
    one block hosts edges of both.
    """
    links: set[tuple[int, int]] = set()
    if not lower or not upper:
        return links
    iso_lo, iso_hi = lower[0].iso, upper[0].iso
    gt = gamma[mesh.tets]
    band = (gt.min(axis=1) <= iso_hi) & (gt.max(axis=1) >= iso_lo)
    idx = np.full(mesh.n_tets, -1, dtype=np.int64)
    band_ids = np.flatnonzero(band)
    idx[band_ids] = np.arange(len(band_ids))
    pairs = mesh.face_tets[~mesh.boundary_face_mask]
    keep = band[pairs[:, 0]] & band[pairs[:, 1]]
    a, b = idx[pairs[keep, 0]], idx[pairs[keep, 1]]
    adj = sp.coo_matrix((np.ones(2 * len(a), dtype=np.int8),
                         (np.r_[a, b], np.r_[b, a])),
                        shape=(len(band_ids), len(band_ids))).tocsr()
    _, label = _cc(adj, directed=False)

    def blocks(c: SubGraph) -> set:
        hosts = c.host_tets(mesh)
        return set(label[idx[hosts[band[hosts]]]].tolist())

    lo_blocks = [blocks(c) for c in lower]
    hi_blocks = [blocks(c) for c in upper]
    for j, sa in enumerate(lo_blocks):
        for k, sb in enumerate(hi_blocks):
            if sa & sb:
                links.add((j, k))
    return links


def are_adjacent(mesh: TetMesh, gamma: np.ndarray, tracer: SurfaceTracer,
                 a: SubGraph, b: SubGraph) -> bool:
    """Whether material connects sub-graph ``a`` to ``b`` one layer above.

    Runs both the surface-trace test and the material-band test; the band
    test is authoritative, disagreement is logged.
    """
    if b.iso < a.iso:
        a, b = b, a
    traced = (a.index, b.index) in trace_links(tracer, [a], [b])
    banded = (a.index, b.index) in band_links(mesh, gamma, [a], [b])
    if traced != banded:
        logger.debug("adjacency disagreement for %s-%s: trace=%s band=%s",
                     a.key, b.key, traced, banded)
    return banded


# ---------------------------------------------------------------------------
# Skeleton tree


@dataclass
class SkeletonTree:
    """Forest of sub-graphs linked across consecutive layers."""
    nodes: dict                # (layer, index) -> SubGraph
    upper: dict                # key -> sorted list of keys one layer up
    lower: dict                # key -> sorted list of keys one layer down
    roots: list                # keys in the first layer

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_layers(self) -> int:
        return len({k[0] for k in self.nodes}) if self.nodes else 0

    def edges(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [(k, u) for k in sorted(self.upper) for u in self.upper[k]]

    def node(self, key: tuple[int, int]) -> SubGraph:
        return self.nodes[key]

    def layer_keys(self, layer: int) -> list[tuple[int, int]]:
        return sorted(k for k in self.nodes if k[0] == layer)


def build_skeleton_tree(mesh: TetMesh, gamma: np.ndarray,
                        layers: list[LayerGraph],
                        threads: int = 1) -> SkeletonTree:
    """Decompose layers into sub-graphs and link consecutive layers.

    ``gamma`` is the per-vertex slicing field the layers were cut from.
    Raises :class:`SkeletonError` if any sub-graph above the first layer has
    no neighbor below it (floating material).
    """
    if not layers:
        return SkeletonTree({}, {}, {}, [])
    isos = [float(g.iso) for g in layers]
    if any(b <= a for a, b in zip(isos, isos[1:])):
        raise SkeletonError("layer iso-values must be strictly increasing")
    comps = [connected_components(g) for g in layers]
    for i, lst in enumerate(comps):
        if not lst:
            raise SkeletonError(f"layer {i} has an empty lattice graph")
    tracer = SurfaceTracer(mesh, extract_boundary(mesh), gamma)

    def link_pair(i: int) -> tuple[int, set[tuple[int, int]]]:
        lo, hi = comps[i], comps[i + 1]
        banded = band_links(mesh, gamma, lo, hi)
        traced = trace_links(tracer, lo, hi)
        if traced != banded:
            logger.debug(
                "layers %d-%d: surface traces found %d links, material bands "
                "%d; using bands", i, i + 1, len(traced), len(banded))
        return i, banded

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(link_pair, range(len(layers) - 1)))
    else:
        results = dict(map(link_pair, range(len(layers) - 1)))

    nodes = {c.key: c for lst in comps for c in lst}
    if len(nodes) != sum(len(lst) for lst in comps):
        raise SkeletonError("duplicate (layer, component) keys across layers")
    upper: dict = {k: [] for k in nodes}
    lower: dict = {k: [] for k in nodes}
    for i in range(len(layers) - 1):
        lo_keys = [c.key for c in comps[i]]
        hi_keys = [c.key for c in comps[i + 1]]
        for j, k in sorted(results[i]):
            upper[lo_keys[j]].append(hi_keys[k])
            lower[hi_keys[k]].append(lo_keys[j])
    roots = [c.key for c in comps[0]]
    floating = [k for k in nodes if k not in set(roots) and not lower[k]]
    if floating:
        raise SkeletonError(
            "floating material: sub-graph(s) with no support below: "
            + ", ".join(map(str, sorted(floating)[:5])))
    return SkeletonTree(nodes, upper, lower, roots)


# ---------------------------------------------------------------------------
# DOT export


def tree_to_dot(tree: SkeletonTree) -> str:
    """GraphViz DOT text for inspection (stable ordering)."""
    out = ["digraph skeleton {", "  rankdir=BT;"]
    for key in sorted(tree.nodes):
        c = tree.nodes[key]
        out.append(f'  "L{key[0]}C{key[1]}" [label="layer {key[0]} comp '
                   f'{key[1]}\\niso {c.iso:.3f}\\n{c.n_vertices}v '
                   f'{c.n_edges}e"];')
    for a, b in tree.edges():
        out.append(f'  "L{a[0]}C{a[1]}" -> "L{b[0]}C{b[1]}";')
    out.append("}")
    return "\n".join(out) + "\n"


def write_dot(path: str | Path, tree: SkeletonTree) -> None:
    Path(path).write_text(tree_to_dot(tree))
