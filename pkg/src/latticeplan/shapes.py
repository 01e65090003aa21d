"""Deterministic synthetic test parts built from voxel grids.

Each solid is defined implicitly (unions of capsules/boxes/tori), sampled on
a regular grid, repaired so the boundary is a closed 2-manifold, and split
into a conforming tet mesh (six tets per cell around the cell's main
diagonal, so neighbouring cells share face triangulations).  Everything here
is deterministic: no randomness, fixed iteration orders.

This module exists for tests and demos; meshing real geometry from surface
scans is out of scope for the library.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .tetmesh import TetMesh

logger = logging.getLogger(__name__)

# Corner code = 4*dx + 2*dy + dz.
_CORNER_OFFSETS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
     [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]], dtype=np.int64)

# Six tets around the main diagonal c000-c111, one per axis permutation.
_KUHN_TETS = np.array(
    [[0, 4, 6, 7], [0, 4, 5, 7], [0, 2, 6, 7],
     [0, 2, 3, 7], [0, 1, 5, 7], [0, 1, 3, 7]], dtype=np.int64)


def _block_connectivity_table() -> np.ndarray:
    """For each 8-bit occupancy pattern of a 2x2x2 block: is the occupied
    subset face-connected (True also for empty patterns)?"""
    adj = [[] for _ in range(8)]
    for a in range(8):
        for b in range(8):
            if bin(a ^ b).count("1") == 1:
                adj[a].append(b)
    table = np.zeros(256, dtype=bool)
    for p in range(256):
        cells = [c for c in range(8) if p >> c & 1]
        if not cells:
            table[p] = True
            continue
        seen = {cells[0]}
        stack = [cells[0]]
        while stack:
            c = stack.pop()
            for nb in adj[c]:
                if p >> nb & 1 and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        table[p] = len(seen) == len(cells)
    return table


_OCC_CONNECTED = _block_connectivity_table()


def _fix_edge_pinches(occ: np.ndarray) -> bool:
    """Fill cells so no two solid cells touch only along a grid edge."""
    changed = False
    for ax1, ax2 in ((0, 1), (0, 2), (1, 2)):
        sl = [slice(None)] * 3

        def shifted(d1: int, d2: int) -> np.ndarray:
            s = list(sl)
            s[ax1] = slice(1, None) if d1 else slice(None, -1)
            s[ax2] = slice(1, None) if d2 else slice(None, -1)
            return occ[tuple(s)]

        a, b = shifted(0, 0), shifted(1, 1)
        c, d = shifted(1, 0), shifted(0, 1)
        bad = a & b & ~c & ~d
        if bad.any():
            c[bad] = True
            changed = True
        a, b = shifted(1, 0), shifted(0, 1)
        c, d = shifted(0, 0), shifted(1, 1)
        bad = a & b & ~c & ~d
        if bad.any():
            c[bad] = True
            changed = True
    return changed


def _fix_vertex_pinches(occ: np.ndarray) -> bool:
    """Fill cells wherever the solid cells around a grid vertex — or the
    empty cells around it — are not face-connected within their 2x2x2 block.

    Disconnected solid = two material fans touching at a point; disconnected
    air = an air pocket pinching off.  Both make the boundary non-manifold;
    both are repaired by filling (material is only ever added)."""
    pattern = np.zeros(tuple(s - 1 for s in occ.shape), dtype=np.int64)
    for code, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
        nx, ny, nz = pattern.shape
        pattern |= occ[dx:dx + nx, dy:dy + ny, dz:dz + nz].astype(np.int64) << code
    bad = ~(_OCC_CONNECTED[pattern] & _OCC_CONNECTED[pattern ^ 0xFF])
    if not bad.any():
        return False
    for i, j, k in np.argwhere(bad):
        p = int(pattern[i, j, k])
        if not _OCC_CONNECTED[p]:
            # Fill the lowest-coded empty cell; rechecked on the next sweep.
            fill = [next(c for c in range(8) if not p >> c & 1)]
        else:
            # Air pinch: fill the smallest empty component entirely.
            comps = _empty_components(p)
            comps.sort(key=lambda cells: (len(cells), cells))
            fill = comps[0]
        for c in fill:
            occ[i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1)] = True
    return True


def _empty_components(p: int) -> list[list[int]]:
    empties = [c for c in range(8) if not p >> c & 1]
    comps = []
    seen: set[int] = set()
    for start in empties:
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        stack = [start]
        while stack:
            c = stack.pop()
            for nb in range(8):
                if bin(c ^ nb).count("1") == 1 and not p >> nb & 1 and nb not in seen:
                    seen.add(nb)
                    comp.append(nb)
                    stack.append(nb)
        comps.append(sorted(comp))
    return comps


def _repair(occ: np.ndarray) -> np.ndarray:
    occ = occ.copy()
    for _ in range(100):
        if not (_fix_edge_pinches(occ) | _fix_vertex_pinches(occ)):
            return occ
    raise RuntimeError("voxel repair did not converge")


def mesh_from_voxels(occ: np.ndarray, voxel: float,
                     origin: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> TetMesh:
    """Conforming tet mesh of the occupied cells (6 Kuhn tets per cell)."""
    occ = _repair(np.asarray(occ, dtype=bool))
    cells = np.argwhere(occ)
    if not len(cells):
        raise ValueError("no occupied voxels")
    nx, ny, nz = occ.shape
    n1, n2 = ny + 1, nz + 1
    corners = cells[:, None, :] + _CORNER_OFFSETS[None, :, :]        # (c, 8, 3)
    keys = (corners[..., 0] * n1 + corners[..., 1]) * n2 + corners[..., 2]
    uniq, inv = np.unique(keys.reshape(-1), return_inverse=True)
    gi = uniq // (n1 * n2)
    gj = uniq // n2 % n1
    gk = uniq % n2
    verts = np.stack([gi, gj, gk], axis=1).astype(np.float64) * voxel + np.asarray(origin)
    corner_ids = inv.reshape(len(cells), 8)
    tets = corner_ids[:, _KUHN_TETS.reshape(-1)].reshape(-1, 4)
    return TetMesh.build(verts, tets)


def mesh_from_implicit(inside, lo: np.ndarray, hi: np.ndarray, voxel: float) -> TetMesh:
    """Mesh ``{p : inside(p)}`` sampled at cell centers on a padded grid.

    ``inside`` takes an (N, 3) array of points and returns a boolean mask.
    The grid is clipped at z = lo[2] so parts sit flat on the build plate.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    counts = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 1)
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * voxel for a in range(3)]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([cx.reshape(-1), cy.reshape(-1), cz.reshape(-1)], axis=1)
    occ = inside(centers).reshape(tuple(counts))
    return mesh_from_voxels(occ, voxel, origin=tuple(lo))


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(points))
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def solid_column(width: float = 20.0, depth: float = 20.0, height: float = 60.0,
                 voxel: float = 2.0) -> TetMesh:
    """Rectangular column with its base on z = 0 (grid-aligned, exact)."""
    nx = max(int(round(width / voxel)), 1)
    ny = max(int(round(depth / voxel)), 1)
    nz = max(int(round(height / voxel)), 1)
    occ = np.ones((nx, ny, nz), dtype=bool)
    return mesh_from_voxels(occ, voxel)


def solid_cylinder(radius: float = 8.0, height: float = 30.0, voxel: float = 1.6) -> TetMesh:
    def inside(p: np.ndarray) -> np.ndarray:
        return (p[:, 0] ** 2 + p[:, 1] ** 2 <= radius ** 2) & (p[:, 2] <= height)

    pad = voxel
    return mesh_from_implicit(
        inside, (-radius - pad, -radius - pad, 0.0),
        (radius + pad, radius + pad, height), voxel)


def solid_sphere(radius: float = 10.0, voxel: float = 1.8) -> TetMesh:
    def inside(p: np.ndarray) -> np.ndarray:
        d = p - np.array([0.0, 0.0, radius])
        return (d * d).sum(axis=1) <= radius ** 2

    pad = voxel
    return mesh_from_implicit(
        inside, (-radius - pad, -radius - pad, 0.0),
        (radius + pad, radius + pad, 2 * radius + pad), voxel)


def solid_torus(ring_radius: float = 11.0, tube_radius: float = 4.5,
                voxel: float = 1.6) -> TetMesh:
    """Torus lying flat (hole axis = z), resting on z = 0."""
    zc = tube_radius

    def inside(p: np.ndarray) -> np.ndarray:
        rho = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2)
        return (rho - ring_radius) ** 2 + (p[:, 2] - zc) ** 2 <= tube_radius ** 2

    r = ring_radius + tube_radius + voxel
    return mesh_from_implicit(inside, (-r, -r, 0.0), (r, r, 2 * tube_radius + voxel), voxel)


def solid_branches(n_branches: int = 3, trunk_radius: float = 9.0,
                   trunk_height: float = 30.0, branch_radius: float = 6.0,
                   branch_spread: float = 20.0, total_height: float = 88.0,
                   voxel: float = 2.2, phase_deg: float = 0.0) -> TetMesh:
    """Trunk splitting into ``n_branches`` straight branches (capsule union).

    Branches run from the trunk top to lateral offset ``branch_spread`` at
    ``total_height``; with 2 branches this is the classic Y shape.
    """
    split = np.array([0.0, 0.0, trunk_height - branch_radius])
    trunk_a = np.array([0.0, 0.0, -trunk_radius])
    trunk_b = np.array([0.0, 0.0, trunk_height])
    tops = []
    for i in range(n_branches):
        ang = math.radians(phase_deg + 360.0 * i / n_branches)
        tops.append(np.array([branch_spread * math.cos(ang),
                              branch_spread * math.sin(ang),
                              total_height]))

    def inside(p: np.ndarray) -> np.ndarray:
        mask = _segment_distance(p, trunk_a, trunk_b) <= trunk_radius
        for top in tops:
            mask |= _segment_distance(p, split, top) <= branch_radius
        return mask

    r = branch_spread + branch_radius + voxel
    return mesh_from_implicit(inside, (-r, -r, 0.0), (r, r, total_height + voxel), voxel)


def solid_y(trunk_radius: float = 7.0, trunk_height: float = 24.0,
            branch_radius: float = 5.5, branch_spread: float = 16.0,
            total_height: float = 58.0, voxel: float = 1.9) -> TetMesh:
    return solid_branches(2, trunk_radius, trunk_height, branch_radius,
                          branch_spread, total_height, voxel, phase_deg=0.0)


def solid_two_columns(column_side: float = 8.0, gap: float = 10.0,
                      plate_thickness: float = 4.0, height: float = 40.0,
                      voxel: float = 2.0) -> TetMesh:
    """Two square columns rising from one shared base plate."""
    def inside(p: np.ndarray) -> np.ndarray:
        plate_w = 2 * column_side + gap
        in_plate = ((np.abs(p[:, 0]) <= plate_w / 2) & (np.abs(p[:, 1]) <= column_side / 2)
                    & (p[:, 2] <= plate_thickness))
        cx = (gap + column_side) / 2
        in_col = ((np.abs(np.abs(p[:, 0]) - cx) <= column_side / 2)
                  & (np.abs(p[:, 1]) <= column_side / 2) & (p[:, 2] <= height))
        return in_plate | in_col

    w = column_side + gap / 2 + voxel
    return mesh_from_implicit(inside, (-w, -column_side / 2 - voxel, 0.0),
                              (w, column_side / 2 + voxel, height), voxel)


def single_tet() -> TetMesh:
    """One regular-ish tetrahedron."""
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [0.5, math.sqrt(3) / 2, 0.0], [0.5, math.sqrt(3) / 6, math.sqrt(6) / 3]])
    return TetMesh.build(verts, np.array([[0, 1, 2, 3]]))


def two_tets() -> TetMesh:
    """Two tets glued along one face."""
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                      [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    return TetMesh.build(verts, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
