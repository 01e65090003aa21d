"""Geodesic-style distance fields and per-tet orientation frames.

Pipeline: diffuse heat from the base region for one short time step, take
the normalized opposite gradient as a unit direction field pointing away
from the base, and fit a scalar potential to it by a Poisson (least-squares
gradient) solve.  The slicing field ``dist`` comes from that direction
field; the two transverse lattice fields ``u`` and ``v`` come from rotating
the slicing direction against a reference vector, fitted the same way.
Frames are per-tet right-handed orthonormal triads; the slicing direction
doubles as the nozzle orientation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linsolve import (DEFAULT_TOL, SolveReport, lumped_volume_matrix,
                       shape_gradients, solve_spd, stiffness_matrix)
from .tetmesh import BaseRegion, SurfaceMesh, TetMesh

logger = logging.getLogger(__name__)

DEFAULT_REF = (1.0, 0.0, 0.0)
_PARALLEL_EPS = 1e-6


@dataclass
class FrameField:
    """Right-handed orthonormal triad per tet: u_dir x nozzle = v_dir."""
    nozzle: np.ndarray   # (m, 3) unit, away from the base; nozzle orientation
    u_dir: np.ndarray    # (m, 3)
    v_dir: np.ndarray    # (m, 3)


@dataclass
class FieldSet:
    """The three per-vertex fields plus frames and solver bookkeeping."""
    dist: np.ndarray     # slicing distance from the base, min over base = 0
    u: np.ndarray        # transverse lattice coordinate, min over mesh = 0
    v: np.ndarray
    frames: FrameField
    heat_time: float
    reports: dict = field(default_factory=dict)


def heat_time(mesh: TetMesh) -> float:
    """Default diffusion time: squared average edge length."""
    h = mesh.average_edge_length()
    return h * h


def solve_heat(mesh: TetMesh, base: BaseRegion, t: float | None = None,
               tol: float = DEFAULT_TOL) -> tuple[np.ndarray, SolveReport]:
    """One implicit heat step from the base: (V - t L) u = V u0, u0 = 1 on base."""
    if t is None:
        t = heat_time(mesh)
    L = stiffness_matrix(mesh)
    V = lumped_volume_matrix(mesh)
    u0 = np.zeros(mesh.n_vertices)
    u0[base.vertex_ids] = 1.0
    A = (V - t * L).tocsr()
    u, rep = solve_spd(A, V @ u0, tol=tol)
    lo, hi = float(u.min()), float(u.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        logger.warning("heat solution leaves [0, 1]: [%.3e, %.3e]", lo, hi)
    return u, rep


def tet_gradients(mesh: TetMesh, values: np.ndarray,
                  basis: np.ndarray | None = None) -> np.ndarray:
    """Per-tet gradient of a per-vertex linear field, shape (m, 3)."""
    if basis is None:
        basis = shape_gradients(mesh)
    vals = np.asarray(values)[mesh.tets]              # (m, 4)
    return np.einsum("ti,tid->td", vals, basis)


def _normalize_rows(vecs: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vecs, axis=1)
    out = np.empty_like(vecs)
    ok = norms > 1e-300
    out[ok] = vecs[ok] / norms[ok, None]
    if (~ok).any():
        logger.warning("%d tets have a vanishing gradient; using fallback direction",
                       int((~ok).sum()))
        out[~ok] = fallback
    return out


def unit_descent_directions(mesh: TetMesh, heat: np.ndarray,
                            basis: np.ndarray | None = None) -> np.ndarray:
    """Unit field pointing away from the heat source: -grad(u)/|grad(u)|."""
    g = tet_gradients(mesh, heat, basis)
    return _normalize_rows(-g, np.array([0.0, 0.0, 1.0]))


_TRUST_FLOOR = 1e-6      # heat values below this (vs max) are solver noise
_RATIO_THRESHOLD = 0.75  # |grad u| sqrt(t) / u below this marks a weak direction
_FAR_SCALE_DIVISOR = 12.0
# Boundary-layer depths to try around the base, as heat-value fractions
# (exp(-3) ~ three diffusion lengths); later entries are thinner fallbacks.
_SOURCE_LAYER_FACTORS = (0.0498, 0.135, 0.223, 0.368, 0.607)
_MIN_TRUSTED_FRACTION = 0.25


def _direction_candidates(mesh, heat, t, basis):
    """Per-tet descent directions plus a trust mask.

    A tet's direction is trusted when its heat values carry signal (above the
    iterative solver's noise floor) and the decay ratio |grad u|*sqrt(t)/u is
    healthy; the ratio collapses in the thin band under insulated caps where
    the gradient loses significance.
    """
    g = tet_gradients(mesh, heat, basis)
    norms = np.linalg.norm(g, axis=1)
    corners = heat[mesh.tets]
    top = float(heat.max())
    signal = corners.min(axis=1) > _TRUST_FLOOR * max(top, 1e-300)
    # geometric-mean corner value ~ the tet-centroid value of an exponential
    # decay, so |grad u| sqrt(t) / u_rep ~ 1 in the bulk of a heat solution
    u_rep = np.ones(mesh.n_tets)
    if signal.any():
        u_rep[signal] = np.exp(np.log(corners[signal]).mean(axis=1))
    ratio = np.where(signal, norms * np.sqrt(t) / u_rep, 0.0)
    good = signal & (ratio >= _RATIO_THRESHOLD) & (norms > 1e-300)
    X = np.zeros_like(g)
    X[good] = -g[good] / norms[good, None]
    return X, good


def _source_layer(mesh: TetMesh, heat: np.ndarray, base: BaseRegion,
                  factor: float) -> np.ndarray:
    """Tets whose heat value marks them within the source boundary layer.

    The one-step heat solution decays like exp(-d / sqrt(t)) away from the
    base, so tets with min-corner value above (base value) * factor lie
    within -ln(factor) diffusion lengths of the source.
    """
    top = float(heat[base.vertex_ids].max())
    return heat[mesh.tets].min(axis=1) > top * factor


def _repair_directions(mesh: TetMesh, X: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Fill untrusted directions by averaging face-adjacent trusted ones."""
    if good.all():
        return X
    if not good.any():
        return X  # nothing to propagate from (e.g. the whole part is base)
    pairs = mesh.face_tets[~mesh.boundary_face_mask]
    bad = ~good
    for _ in range(max(64, 4 * int(np.sqrt(mesh.n_tets)))):
        if not bad.any():
            break
        acc = np.zeros_like(X)
        a, b = pairs[:, 0], pairs[:, 1]
        fwd = bad[a] & ~bad[b]
        np.add.at(acc, a[fwd], X[b[fwd]])
        rev = bad[b] & ~bad[a]
        np.add.at(acc, b[rev], X[a[rev]])
        norms = np.linalg.norm(acc, axis=1)
        fix = bad & (norms > 0.1)
        if not fix.any():
            break
        X[fix] = acc[fix] / norms[fix, None]
        bad[fix] = False
    if bad.any():
        mean = X[~bad].mean(axis=0)
        n = np.linalg.norm(mean)
        X[bad] = mean / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
        logger.warning("%d tets kept no usable direction; filled with the mean",
                       int(bad.sum()))
    return X


def robust_descent_directions(mesh: TetMesh, base: BaseRegion, t: float,
                              basis: np.ndarray, L, V,
                              tol: float) -> tuple[np.ndarray, dict]:
    """Unit away-from-base directions that stay meaningful on long parts.

    The short-time heat solution decays below the iterative solver's noise
    floor a few dozen edge lengths from the base, so a second, long-time
    solve (diffusion length ~ bbox diagonal / 12) supplies directions where
    the short-time field has no signal.  Directions in weak-gradient bands
    (under insulated caps) are rebuilt from trusted neighbors.
    """
    u0 = np.zeros(mesh.n_vertices)
    u0[base.vertex_ids] = 1.0
    reports = {}
    u1, reports["heat"] = solve_spd((V - t * L).tocsr(), V @ u0, tol=tol)
    X, good = _direction_candidates(mesh, u1, t, basis)
    u_tet = u1[mesh.tets].max(axis=1)
    if (u_tet <= _TRUST_FLOOR * max(float(u1.max()), 1e-300)).any():
        lo, hi = mesh.bbox()
        t2 = (float(np.linalg.norm(hi - lo)) / _FAR_SCALE_DIVISOR) ** 2
        if t2 > t:
            u2, reports["heat_far"] = solve_spd((V - t2 * L).tocsr(), V @ u0,
                                                tol=tol)
            X2, good2 = _direction_candidates(mesh, u2, t2, basis)
            take = ~good & good2
            X[take] = X2[take]
            good = good | take
    # The heat gradient is least accurate in a boundary layer around the
    # sources (the solution's curvature dominates there), which tilts
    # directions next to the base.  Rebuild everything within ~2 diffusion
    # lengths from its neighbors, shrinking the layer if the part is too
    # small to afford it.
    reports["source_layer"] = None
    for factor in _SOURCE_LAYER_FACTORS:
        layer = _source_layer(mesh, u1, base, factor)
        kept = good & ~layer
        if kept.sum() >= max(1, _MIN_TRUSTED_FRACTION * good.sum()):
            good = kept
            reports["source_layer"] = layer
            break
    return _repair_directions(mesh, X, good), reports


def integrated_divergence(mesh: TetMesh, vectors: np.ndarray,
                          basis: np.ndarray | None = None) -> np.ndarray:
    """Per-vertex integrated divergence: sum_T |T| grad(phi_iT) . g_T."""
    if basis is None:
        basis = shape_gradients(mesh)
    contrib = np.einsum("tid,td->ti", basis, vectors) * mesh.tet_volumes[:, None]
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.tets.reshape(-1), contrib.reshape(-1))
    return out


def solve_poisson(laplacian, divergence: np.ndarray,
                  tol: float = DEFAULT_TOL) -> tuple[np.ndarray, SolveReport]:
    """Fit a potential whose gradient matches the divergence's source field.

    Solves L phi = -b for the negative-semidefinite Laplacian, i.e. the
    least-squares normal equations of ``min || grad(phi) - g ||`` when b is
    the integrated divergence of g.  The right-hand side is projected
    against the constant nullspace; the returned potential is unshifted.
    """
    b = np.asarray(divergence, dtype=np.float64)
    b = b - b.mean()
    phi, rep = solve_spd((-laplacian).tocsr(), b, tol=tol)
    return phi, rep


def solve_poisson_pinned(laplacian, divergence: np.ndarray,
                         fixed_ids: np.ndarray,
                         tol: float = DEFAULT_TOL
                         ) -> tuple[np.ndarray, SolveReport]:
    """Poisson fit with the potential pinned to zero on ``fixed_ids``.

    Pinning the whole source region levels it exactly (an unconstrained fit
    only matches gradients, so the source can come out tilted by the local
    boundary layer).  The reduced system on the free vertices is strictly
    positive definite, so no nullspace projection is needed.
    """
    n = laplacian.shape[0]
    free = np.ones(n, dtype=bool)
    free[np.asarray(fixed_ids, dtype=np.int64)] = False
    a = (-laplacian).tocsr()[free][:, free]
    x, rep = solve_spd(a.tocsr(), np.asarray(divergence, float)[free], tol=tol)
    phi = np.zeros(n)
    phi[free] = x
    return phi, rep


def build_frames(directions: np.ndarray, ref=DEFAULT_REF) -> FrameField:
    """Orthonormal frames from unit nozzle directions and a reference vector.

    u_dir = ref x n / |ref x n| with fallbacks (0,1,0) then (0,0,1) where ref
    is near-parallel to n; v_dir = u_dir x n.
    """
    n = np.asarray(directions, dtype=np.float64)
    refs = [np.asarray(ref, dtype=np.float64),
            np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])]
    a = np.cross(np.broadcast_to(refs[0], n.shape), n)
    for alt in refs[1:]:
        small = np.linalg.norm(a, axis=1) < _PARALLEL_EPS
        if not small.any():
            break
        a[small] = np.cross(np.broadcast_to(alt, n[small].shape), n[small])
    norms = np.linalg.norm(a, axis=1)
    if (norms < _PARALLEL_EPS).any():
        raise ValueError("no reference vector is transverse to some nozzle direction")
    u_dir = a / norms[:, None]
    v_dir = np.cross(u_dir, n)
    return FrameField(n.copy(), u_dir, v_dir)


def compute_fields(mesh: TetMesh, base: BaseRegion, ref=DEFAULT_REF,
                   t: float | None = None, tol: float = DEFAULT_TOL) -> FieldSet:
    """Full field pipeline: heat, slicing potential, frames, lattice potentials."""
    if t is None:
        t = heat_time(mesh)
    basis = shape_gradients(mesh)
    L = stiffness_matrix(mesh)
    V = lumped_volume_matrix(mesh)
    away, reports = robust_descent_directions(mesh, base, t, basis, L, V, tol)
    div_d = integrated_divergence(mesh, away, basis)
    if len(base.vertex_ids) < int(mesh.boundary_vertex_mask.sum()):
        dist, rep_d = solve_poisson_pinned(L, div_d, base.vertex_ids, tol=tol)
    else:
        # the base covers the whole boundary (no free surface to carry the
        # natural slope condition): fall back to the unconstrained fit
        dist, rep_d = solve_poisson(L, div_d, tol=tol)
        dist = dist - dist[base.vertex_ids].min()

    nozzle = _normalize_rows(tet_gradients(mesh, dist, basis), np.array([0.0, 0.0, 1.0]))
    layer = reports.pop("source_layer", None)
    if layer is not None:
        # The fitted potential has the same boundary layer at the base as the
        # heat solution; rebuild nozzle directions there the same way.
        nozzle = _repair_directions(mesh, nozzle, ~layer)
    frames = build_frames(nozzle, ref)
    dev = np.degrees(np.arccos(np.clip(np.einsum("td,td->t", nozzle, away), -1, 1)))
    if dev.mean() > 15.0:
        logger.warning("slicing gradient deviates from the heat direction by "
                       "%.1f deg on average", dev.mean())

    u_vals, rep_u = solve_poisson(L, integrated_divergence(mesh, frames.u_dir, basis), tol=tol)
    v_vals, rep_v = solve_poisson(L, integrated_divergence(mesh, frames.v_dir, basis), tol=tol)
    u_vals -= u_vals.min()
    v_vals -= v_vals.min()
    reports.update({"dist": rep_d, "u": rep_u, "v": rep_v})
    return FieldSet(dist, u_vals, v_vals, frames, t, reports)


def frame_orthonormality_error(frames: FrameField) -> float:
    """Largest deviation from orthonormality across all tets."""
    errs = []
    for a, b in ((frames.nozzle, frames.u_dir), (frames.nozzle, frames.v_dir),
                 (frames.u_dir, frames.v_dir)):
        errs.append(np.abs(np.einsum("td,td->t", a, b)).max(initial=0.0))
    for a in (frames.nozzle, frames.u_dir, frames.v_dir):
        errs.append(np.abs(np.linalg.norm(a, axis=1) - 1.0).max(initial=0.0))
    herr = np.linalg.norm(np.cross(frames.u_dir, frames.nozzle) - frames.v_dir,
                          axis=1).max(initial=0.0)
    return float(max(max(errs), herr))


# ---------------------------------------------------------------------------
# Exports


def write_field(path: str | Path, values: np.ndarray) -> None:
    """Per-vertex attribute file: 'index value' per line, full precision."""
    with open(path, "w") as fh:
        fh.write(f"{len(values)}\n")
        for i, v in enumerate(values):
            fh.write(f"{i} {float(v)!r}\n")


def read_field(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().split()
    n = int(lines[0])
    vals = np.empty(n)
    for k in range(n):
        vals[int(lines[1 + 2 * k])] = float(lines[2 + 2 * k])
    return vals


def write_surface_ply(path: str | Path, mesh: TetMesh, surface: SurfaceMesh,
                      values: np.ndarray) -> None:
    """ASCII PLY of the boundary with a per-vertex scalar 'quality' property."""
    ids = surface.vertex_ids()
    remap = {int(v): i for i, v in enumerate(ids)}
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(ids)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float quality\n")
        fh.write(f"element face {surface.n_tris}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in ids:
            x, y, z = mesh.vertices[v]
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {float(values[v]):.6f}\n")
        for tri in surface.tris:
            fh.write(f"3 {remap[int(tri[0])]} {remap[int(tri[1])]} {remap[int(tri[2])]}\n")
