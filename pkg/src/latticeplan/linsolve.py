"""Sparse FEM operators on tet meshes and a Jacobi-preconditioned CG solver.

The Laplacian follows the negative-semidefinite convention: applying it to a
constant field yields zero, diagonals are negative.  Heat/Poisson style
systems built from it (``V - t*L`` and ``-L``) are symmetric positive
(semi)definite and are solved with conjugate gradients preconditioned by the
inverse diagonal.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tetmesh import TetMesh

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9


class SolveError(RuntimeError):
    """Raised when CG fails to reach the requested tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class SolveReport:
    iterations: int
    residual: float       # final ||b - A x|| / ||b||, recomputed from scratch
    seconds: float


def shape_gradients(mesh: TetMesh) -> np.ndarray:
    """Per-tet gradients of the four linear nodal basis functions, shape (m, 4, 3).

    grad phi_i is normal to the face opposite corner i, points toward corner
    i, with magnitude area(opposite face) / (3 |T|).
    """
    v = mesh.vertices
    t = mesh.tets
    a, b, c, d = (v[t[:, i]] for i in range(4))
    vol6 = 6.0 * mesh.tet_volumes             # = |det| since orientation is positive
    g = np.empty((len(t), 4, 3))
    # grad phi_0 from face (1,2,3): inward normal = (d-b) x (c-b) / (6V).
    g[:, 0] = np.cross(d - b, c - b) / vol6[:, None]
    g[:, 1] = np.cross(c - a, d - a) / vol6[:, None]
    g[:, 2] = np.cross(d - a, b - a) / vol6[:, None]
    g[:, 3] = np.cross(b - a, c - a) / vol6[:, None]
    return g


def stiffness_matrix(mesh: TetMesh) -> sp.csr_matrix:
    """Negative-semidefinite FEM Laplacian: L[i,j] = -sum_T |T| grad_i . grad_j."""
    g = shape_gradients(mesh)
    m = mesh.n_tets
    # Element matrices: |T| * g_i . g_j, negated.
    elem = -np.einsum("tid,tjd->tij", g, g) * mesh.tet_volumes[:, None, None]
    rows = np.repeat(mesh.tets, 4, axis=1).reshape(m, 4, 4)
    cols = np.tile(mesh.tets, (1, 4)).reshape(m, 4, 4)
    L = sp.coo_matrix((elem.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
                      shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
    L.sum_duplicates()
    return L


def lumped_volume_matrix(mesh: TetMesh) -> sp.dia_matrix:
    """Diagonal vertex volumes: a quarter of each incident tet's volume."""
    vols = np.zeros(mesh.n_vertices)
    np.add.at(vols, mesh.tets.reshape(-1), np.repeat(mesh.tet_volumes / 4.0, 4))
    return sp.diags(vols)


def solve_spd(A: sp.spmatrix, b: np.ndarray, tol: float = DEFAULT_TOL,
              maxiter: int | None = None) -> tuple[np.ndarray, SolveReport]:
    """Jacobi-preconditioned conjugate gradients for SPD / consistent SPSD systems.

    Converges when ||b - A x|| <= tol * ||b||.  Raises SolveError (carrying
    the best achieved residual) if maxiter is exhausted.
    """
    t0 = time.perf_counter()
    A = A.tocsr()
    b = np.asarray(b, dtype=np.float64)
    n = len(b)
    if maxiter is None:
        maxiter = 10 * n
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, time.perf_counter() - t0)
    diag = A.diagonal()
    if (diag <= 0).any():
        raise ValueError("system diagonal is not positive; not SPD in this convention")
    inv_diag = 1.0 / diag

    x = np.zeros(n)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    it = 0
    best = float(np.linalg.norm(r)) / bnorm
    while it < maxiter:
        if np.linalg.norm(r) <= tol * bnorm:
            break
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        best = min(best, float(np.linalg.norm(r)) / bnorm)
    true_res = float(np.linalg.norm(b - A @ x)) / bnorm
    report = SolveReport(it, true_res, time.perf_counter() - t0)
    if true_res > tol:
        raise SolveError(
            f"CG stalled at relative residual {true_res:.3e} (target {tol:.1e}) "
            f"after {it} iterations", true_res, it)
    return x, report
