"""Tetrahedral mesh container with validation, adjacency, and file I/O.

Supports TetGen ASCII pairs (``.node``/``.ele``) and Medit (``.mesh``)
formats.  Meshes are validated on construction: consistent positive
orientation, in-range indices, non-degenerate elements, and a closed
orientable 2-manifold boundary.  Derived adjacency (faces, edges,
vertex->tet incidence) is built once and shared by the downstream stages.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEGENERATE_VOLUME = 1e-12

# Face i is opposite corner i, wound so its normal points away from corner i
# (outward when the face lies on the boundary of a positively oriented tet).
TET_FACE_CORNERS = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)
TET_EDGE_CORNERS = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)


class MeshError(Exception):
    """Base class for mesh problems."""


class MeshParseError(MeshError):
    """Raised when an input file cannot be parsed."""


class MeshValidationError(MeshError):
    """Raised when a mesh violates a structural invariant."""


def tet_signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volume of each tet (positive for right-handed vertex order)."""
    a = vertices[tets[:, 0]]
    ab = vertices[tets[:, 1]] - a
    ac = vertices[tets[:, 2]] - a
    ad = vertices[tets[:, 3]] - a
    return np.einsum("ij,ij->i", np.cross(ab, ac), ad) / 6.0


def _pack3(tri: np.ndarray, n: int) -> np.ndarray:
    return (tri[:, 0].astype(np.int64) * n + tri[:, 1]) * n + tri[:, 2]


def _pack2(edge: np.ndarray, n: int) -> np.ndarray:
    return edge[:, 0].astype(np.int64) * n + edge[:, 1]


@dataclass
class TetMesh:
    vertices: np.ndarray          # (n, 3) float64
    tets: np.ndarray              # (m, 4) int64, positive orientation
    faces: np.ndarray             # (F, 3) int64, each row sorted ascending
    face_tets: np.ndarray         # (F, 2) int64, second entry -1 on the boundary
    tet_faces: np.ndarray         # (m, 4) face index opposite each corner
    face_edges: np.ndarray        # (F, 3) edge ids for (a,b), (a,c), (b,c) of the sorted face
    edges: np.ndarray             # (E, 2) int64, each row sorted ascending
    tet_volumes: np.ndarray       # (m,)
    boundary_face_mask: np.ndarray
    boundary_edge_mask: np.ndarray
    boundary_vertex_mask: np.ndarray
    vert_tet_offsets: np.ndarray  # CSR offsets into vert_tet_ids
    vert_tet_ids: np.ndarray
    edge_tet_offsets: np.ndarray  # CSR offsets into edge_tet_ids
    edge_tet_ids: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def incident_tets(self, vertex: int) -> np.ndarray:
        """Tet ids touching a vertex."""
        return self.vert_tet_ids[self.vert_tet_offsets[vertex]:self.vert_tet_offsets[vertex + 1]]

    def edge_incident_tets(self, edge: int) -> np.ndarray:
        return self.edge_tet_ids[self.edge_tet_offsets[edge]:self.edge_tet_offsets[edge + 1]]

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def average_edge_length(self) -> float:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return float(np.sqrt((d * d).sum(axis=1)).mean())

    @classmethod
    def build(cls, vertices: np.ndarray, tets: np.ndarray, validate: bool = True) -> "TetMesh":
        vertices = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
        tets = np.ascontiguousarray(np.asarray(tets, dtype=np.int64))
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshValidationError(f"vertices must be (n, 3), got {vertices.shape}")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshValidationError(f"tets must be (m, 4), got {tets.shape}")
        n = len(vertices)
        if tets.size and (tets.min() < 0 or tets.max() >= n):
            bad = np.where((tets < 0) | (tets >= n))[0][0]
            raise MeshValidationError(
                f"tet {bad} references vertex {tets[bad][(tets[bad] < 0) | (tets[bad] >= n)][0]} "
                f"outside [0, {n})")
        for t in range(len(tets)):
            if len(set(tets[t])) != 4:
                raise MeshValidationError(f"tet {t} repeats a vertex: {tets[t].tolist()}")

        # Enforce positive orientation by swapping two corners where needed.
        vol = tet_signed_volumes(vertices, tets)
        neg = vol < 0
        if neg.any():
            tets = tets.copy()
            tets[neg, 0], tets[neg, 1] = tets[neg, 1].copy(), tets[neg, 0].copy()
            vol = np.abs(vol)
        small = np.abs(vol) <= DEGENERATE_VOLUME
        if small.any():
            bad = int(np.where(small)[0][0])
            raise MeshValidationError(
                f"tet {bad} is degenerate (|volume| = {abs(vol[bad]):.3e} <= {DEGENERATE_VOLUME})")

        m = len(tets)
        # Faces: 4 per tet, dedup on sorted corner triples.
        raw_faces = tets[:, TET_FACE_CORNERS.reshape(-1)].reshape(-1, 3)  # (4m, 3) wound
        sorted_faces = np.sort(raw_faces, axis=1)
        keys = _pack3(sorted_faces, n)
        uniq_keys, first_slot, inv, counts = np.unique(
            keys, return_index=True, return_inverse=True, return_counts=True)
        if counts.max(initial=1) > 2:
            slot = int(first_slot[int(np.argmax(counts))])
            raise MeshValidationError(
                f"face {sorted_faces[slot].tolist()} is shared by {counts.max()} tets")
        faces = sorted_faces[first_slot]
        tet_faces = inv.reshape(m, 4)
        face_tets = np.full((len(faces), 2), -1, dtype=np.int64)
        slot_tet = np.repeat(np.arange(m, dtype=np.int64), 4)
        order = np.argsort(inv, kind="stable")
        starts = np.searchsorted(inv[order], np.arange(len(faces)))
        face_tets[:, 0] = slot_tet[order[starts]]
        second = counts == 2
        face_tets[second, 1] = slot_tet[order[starts[second] + 1]]
        boundary_face_mask = counts == 1

        # Edges: 6 per tet, dedup.
        raw_edges = tets[:, TET_EDGE_CORNERS.reshape(-1)].reshape(-1, 2)
        raw_edges = np.sort(raw_edges, axis=1)
        ekeys = _pack2(raw_edges, n)
        uniq_ekeys, einv = np.unique(ekeys, return_inverse=True)
        edges = np.stack([uniq_ekeys // n, uniq_ekeys % n], axis=1)
        # Edge -> incident tets (CSR), deduped per (edge, tet).
        et = np.unique(np.stack([einv, np.repeat(np.arange(m, dtype=np.int64), 6)], axis=1), axis=0)
        edge_tet_offsets = np.zeros(len(edges) + 1, dtype=np.int64)
        np.add.at(edge_tet_offsets, et[:, 0] + 1, 1)
        edge_tet_offsets = np.cumsum(edge_tet_offsets)
        edge_tet_ids = et[:, 1]

        # Face -> its 3 edges (sorted face (a,b,c) -> edges (a,b), (a,c), (b,c)).
        fe = np.stack([faces[:, [0, 1]], faces[:, [0, 2]], faces[:, [1, 2]]], axis=1)
        face_edges = np.searchsorted(uniq_ekeys, _pack2(fe.reshape(-1, 2), n)).reshape(-1, 3)

        boundary_edge_mask = np.zeros(len(edges), dtype=bool)
        boundary_edge_mask[face_edges[boundary_face_mask].reshape(-1)] = True
        boundary_vertex_mask = np.zeros(n, dtype=bool)
        boundary_vertex_mask[faces[boundary_face_mask].reshape(-1)] = True

        # Vertex -> incident tets (CSR).
        vt_vert = tets.reshape(-1)
        vt_tet = np.repeat(np.arange(m, dtype=np.int64), 4)
        order = np.argsort(vt_vert, kind="stable")
        vert_tet_offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(vert_tet_offsets, vt_vert + 1, 1)
        vert_tet_offsets = np.cumsum(vert_tet_offsets)
        vert_tet_ids = vt_tet[order]

        mesh = cls(vertices, tets, faces, face_tets, tet_faces, face_edges, edges,
                   vol, boundary_face_mask, boundary_edge_mask, boundary_vertex_mask,
                   vert_tet_offsets, vert_tet_ids, edge_tet_offsets, edge_tet_ids)
        if validate:
            _validate_boundary(mesh, raw_faces, inv, counts)
        return mesh


def _validate_boundary(mesh: TetMesh, raw_faces: np.ndarray, slot_face: np.ndarray,
                       counts: np.ndarray) -> None:
    """Closed orientable 2-manifold boundary + opposite interior windings."""
    # Interior faces must be wound oppositely by their two tets: for each face
    # the two raw (wound) copies must be reverse cycles.  With positively
    # oriented tets this holds by construction; check it anyway since it is
    # the contract downstream stages rely on.
    order = np.argsort(slot_face, kind="stable")
    starts = np.searchsorted(slot_face[order], np.arange(mesh.n_faces))
    interior = np.where(counts == 2)[0]
    if len(interior):
        f1 = raw_faces[order[starts[interior]]]
        f2 = raw_faces[order[starts[interior] + 1]]
        # Reverse cycle test: some rotation of reversed f2 equals f1.
        r2 = f2[:, ::-1]
        ok = np.zeros(len(interior), dtype=bool)
        for shift in range(3):
            ok |= (np.roll(r2, shift, axis=1) == f1).all(axis=1)
        if not ok.all():
            bad = interior[~ok][0]
            raise MeshValidationError(
                f"interior face {mesh.faces[bad].tolist()} is wound the same way by both tets")

    btri = _boundary_triangles(mesh)
    if len(btri) == 0:
        raise MeshValidationError("mesh has no boundary faces")
    # Each boundary edge must appear in exactly two boundary faces, once per
    # direction (closed + orientable).
    n = mesh.n_vertices
    dir_edges = np.concatenate([btri[:, [0, 1]], btri[:, [1, 2]], btri[:, [2, 0]]])
    dkeys = _pack2(dir_edges, n)
    if len(np.unique(dkeys)) != len(dkeys):
        raise MeshValidationError("boundary is not orientable (repeated directed edge)")
    ukeys = _pack2(np.sort(dir_edges, axis=1), n)
    uniq, cnt = np.unique(ukeys, return_counts=True)
    if (cnt != 2).any():
        bad = uniq[cnt != 2][0]
        raise MeshValidationError(
            f"boundary edge ({bad // n}, {bad % n}) lies in {cnt[cnt != 2][0]} boundary faces "
            "(boundary not a closed manifold)")
    _check_vertex_links(btri)


def _check_vertex_links(btri: np.ndarray) -> None:
    """Boundary faces around each boundary vertex must form a single fan."""
    from collections import defaultdict
    incident: dict[int, list[int]] = defaultdict(list)
    for t in range(len(btri)):
        for v in btri[t]:
            incident[int(v)].append(t)
    # Union-find over each vertex's incident faces, joined across shared edges.
    edge_faces: dict[tuple[int, int], list[int]] = defaultdict(list)
    for t in range(len(btri)):
        a, b, c = (int(x) for x in btri[t])
        for e in ((a, b), (b, c), (c, a)):
            edge_faces[(min(e), max(e))].append(t)
    adj: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for (a, b), fl in edge_faces.items():
        if len(fl) == 2:
            adj[a].append((fl[0], fl[1]))
            adj[b].append((fl[0], fl[1]))
    for v, tris in incident.items():
        parent = {t: t for t in tris}

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for t1, t2 in adj.get(v, ()):
            parent[find(t1)] = find(t2)
        roots = {find(t) for t in tris}
        if len(roots) != 1:
            raise MeshValidationError(
                f"boundary vertex {v} is non-manifold ({len(roots)} surface fans meet there)")


def _boundary_triangles(mesh: TetMesh) -> np.ndarray:
    """Wound outward-facing triangles for all boundary faces."""
    bidx = np.where(mesh.boundary_face_mask)[0]
    tet = mesh.face_tets[bidx, 0]
    tris = np.empty((len(bidx), 3), dtype=np.int64)
    # Locate which corner of the tet the face is opposite to.
    for local in range(4):
        sel = mesh.tet_faces[tet, local] == bidx
        tris[sel] = mesh.tets[tet[sel]][:, TET_FACE_CORNERS[local]]
    return tris


@dataclass
class SurfaceMesh:
    """Boundary triangle mesh with outward normals and cross-edge adjacency."""
    tris: np.ndarray       # (B, 3) global vertex ids, wound outward
    face_ids: np.ndarray   # (B,) parent face index in the tet mesh
    tet_ids: np.ndarray    # (B,) parent tet
    normals: np.ndarray    # (B, 3) unit outward
    areas: np.ndarray      # (B,)
    neighbors: np.ndarray  # (B, 3) neighbor tri across edge opposite corner k

    @property
    def n_tris(self) -> int:
        return len(self.tris)

    def vertex_ids(self) -> np.ndarray:
        return np.unique(self.tris.reshape(-1))


def extract_boundary(mesh: TetMesh) -> SurfaceMesh:
    tris = _boundary_triangles(mesh)
    bidx = np.where(mesh.boundary_face_mask)[0]
    tet_ids = mesh.face_tets[bidx, 0]
    p0 = mesh.vertices[tris[:, 0]]
    cr = np.cross(mesh.vertices[tris[:, 1]] - p0, mesh.vertices[tris[:, 2]] - p0)
    nrm = np.linalg.norm(cr, axis=1)
    normals = cr / nrm[:, None]
    areas = nrm / 2.0

    # Cross-edge adjacency: edge opposite corner k is (tris[k+1], tris[k+2]).
    n = mesh.n_vertices
    B = len(tris)
    opp = np.stack([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]], axis=1)  # (B,3,2)
    keys = _pack2(np.sort(opp.reshape(-1, 2), axis=1), n)
    order = np.argsort(keys, kind="stable")
    neighbors = np.full((B, 3), -1, dtype=np.int64)
    flat_tri = np.repeat(np.arange(B, dtype=np.int64), 3)
    flat_slot = np.tile(np.arange(3, dtype=np.int64), B)
    sk = keys[order]
    same = sk[:-1] == sk[1:]
    i1 = order[:-1][same]
    i2 = order[1:][same]
    neighbors[flat_tri[i1], flat_slot[i1]] = flat_tri[i2]
    neighbors[flat_tri[i2], flat_slot[i2]] = flat_tri[i1]
    return SurfaceMesh(tris, bidx, tet_ids, normals, areas, neighbors)


def surface_area(surface: SurfaceMesh) -> float:
    return float(surface.areas.sum())


def enclosed_volume(mesh: TetMesh, surface: SurfaceMesh) -> float:
    """Volume enclosed by the outward-wound boundary (divergence theorem)."""
    a = mesh.vertices[surface.tris[:, 0]]
    b = mesh.vertices[surface.tris[:, 1]]
    c = mesh.vertices[surface.tris[:, 2]]
    return float(np.einsum("ij,ij->i", np.cross(a, b), c).sum() / 6.0)


@dataclass
class BaseRegion:
    """Vertices printed directly on the build plate (distance sources)."""
    vertex_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.vertex_ids)


def select_base(mesh: TetMesh, eps: float | None = None,
                vertices: np.ndarray | None = None) -> BaseRegion:
    """Pick the base region, either by z-threshold or an explicit vertex list.

    Threshold mode keeps boundary vertices with z <= z_min + eps
    (default eps = 1e-3 * bounding-box height).  Explicit mode validates that
    every listed vertex lies on the boundary.
    """
    if vertices is not None:
        ids = np.unique(np.asarray(vertices, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= mesh.n_vertices):
            raise MeshValidationError("base vertex id out of range")
        interior = ids[~mesh.boundary_vertex_mask[ids]]
        if len(interior):
            raise MeshValidationError(
                f"base vertex {int(interior[0])} is not on the mesh boundary")
        if not len(ids):
            raise MeshValidationError("base region is empty")
        return BaseRegion(ids)
    lo, hi = mesh.bbox()
    height = hi[2] - lo[2]
    if eps is None:
        eps = 1e-3 * height
    sel = mesh.boundary_vertex_mask & (mesh.vertices[:, 2] <= lo[2] + eps)
    ids = np.where(sel)[0]
    if not len(ids):
        raise MeshValidationError(f"no boundary vertices within {eps} of z_min")
    return BaseRegion(ids)


def mesh_stats(mesh: TetMesh) -> dict:
    lo, hi = mesh.bbox()
    return {
        "vertices": mesh.n_vertices,
        "tets": mesh.n_tets,
        "faces": mesh.n_faces,
        "edges": mesh.n_edges,
        "boundary_faces": int(mesh.boundary_face_mask.sum()),
        "boundary_edges": int(mesh.boundary_edge_mask.sum()),
        "boundary_vertices": int(mesh.boundary_vertex_mask.sum()),
        "volume": float(mesh.tet_volumes.sum()),
        "bbox_min": lo.tolist(),
        "bbox_max": hi.tolist(),
        "avg_edge_length": mesh.average_edge_length(),
    }


# ---------------------------------------------------------------------------
# File I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def load_mesh(path: str | Path, fmt: str | None = None) -> TetMesh:
    """Load a tet mesh from TetGen (.node/.ele) or Medit (.mesh) files.

    ``path`` may point at either file of a TetGen pair.  Vertex indexing
    (0- or 1-based) is auto-detected.
    """
    path = Path(path)
    if fmt is None:
        suffix = path.suffix.lower()
        if suffix in (".node", ".ele"):
            fmt = "tetgen"
        elif suffix == ".mesh":
            fmt = "medit"
        else:
            raise MeshParseError(f"cannot infer mesh format from '{path.name}'")
    if fmt == "tetgen":
        return _load_tetgen(path)
    if fmt == "medit":
        return _load_medit(path)
    raise MeshParseError(f"unknown mesh format '{fmt}'")


def save_mesh(mesh: TetMesh, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        suffix = path.suffix.lower()
        fmt = {"node": "tetgen", "ele": "tetgen", "mesh": "medit"}.get(suffix.lstrip("."))
        if fmt is None:
            raise MeshParseError(f"cannot infer mesh format from '{path.name}'")
    if fmt == "tetgen":
        _save_tetgen(mesh, path)
    elif fmt == "medit":
        _save_medit(mesh, path)
    else:
        raise MeshParseError(f"unknown mesh format '{fmt}'")


def _data_lines(path: Path) -> list[list[str]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshParseError(f"cannot read '{path}': {exc}") from exc
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line.split())
    return out


def _load_tetgen(path: Path) -> TetMesh:
    stem = path.with_suffix("")
    node_path = stem.with_suffix(".node")
    ele_path = stem.with_suffix(".ele")
    for p in (node_path, ele_path):
        if not p.exists():
            raise MeshParseError(f"missing TetGen file '{p}'")
    nlines = _data_lines(node_path)
    try:
        n_pts = int(nlines[0][0])
        rows = nlines[1:1 + n_pts]
        idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
        verts = np.array([[float(r[1]), float(r[2]), float(r[3])] for r in rows])
    except (IndexError, ValueError) as exc:
        raise MeshParseError(f"malformed TetGen node file '{node_path}': {exc}") from exc
    if len(rows) != n_pts:
        raise MeshParseError(f"'{node_path}' declares {n_pts} points, found {len(rows)}")
    base = int(idx[0])
    if base not in (0, 1) or not np.array_equal(idx, np.arange(base, base + n_pts)):
        raise MeshParseError(f"'{node_path}' indices are not consecutive 0- or 1-based")
    elines = _data_lines(ele_path)
    try:
        n_tets = int(elines[0][0])
        rows = elines[1:1 + n_tets]
        tets = np.array([[int(r[1]), int(r[2]), int(r[3]), int(r[4])] for r in rows],
                        dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshParseError(f"malformed TetGen ele file '{ele_path}': {exc}") from exc
    if len(rows) != n_tets:
        raise MeshParseError(f"'{ele_path}' declares {n_tets} tets, found {len(rows)}")
    return TetMesh.build(verts, tets - base)


def _save_tetgen(mesh: TetMesh, path: Path) -> None:
    stem = path.with_suffix("")
    node_path = stem.with_suffix(".node")
    ele_path = stem.with_suffix(".ele")
    with open(node_path, "w") as fh:
        fh.write(f"{mesh.n_vertices} 3 0 0\n")
        for i, (x, y, z) in enumerate(mesh.vertices):
            fh.write(f"{i} {_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.n_tets} 4 0\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def _load_medit(path: Path) -> TetMesh:
    lines = _data_lines(path)
    verts = None
    tets = None
    i = 0
    while i < len(lines):
        kw = lines[i][0].lower()
        if kw == "vertices" or (kw == "vertices" and len(lines[i]) == 1):
            count = int(lines[i][1]) if len(lines[i]) > 1 else int(lines[i + 1][0])
            start = i + 1 if len(lines[i]) > 1 else i + 2
            rows = lines[start:start + count]
            verts = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows])
            i = start + count
        elif kw == "tetrahedra":
            count = int(lines[i][1]) if len(lines[i]) > 1 else int(lines[i + 1][0])
            start = i + 1 if len(lines[i]) > 1 else i + 2
            rows = lines[start:start + count]
            tets = np.array([[int(r[0]), int(r[1]), int(r[2]), int(r[3])] for r in rows],
                            dtype=np.int64) - 1
            i = start + count
        elif kw == "end":
            break
        else:
            i += 1
    if verts is None or tets is None:
        raise MeshParseError(f"'{path}' lacks Vertices and/or Tetrahedra sections")
    return TetMesh.build(verts, tets)


def _save_medit(mesh: TetMesh, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("MeshVersionFormatted 2\nDimension 3\n")
        fh.write(f"Vertices\n{mesh.n_vertices}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} 0\n")
        fh.write(f"Tetrahedra\n{mesh.n_tets}\n")
        for t in mesh.tets:
            fh.write(f"{t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1} 0\n")
        fh.write("End\n")
