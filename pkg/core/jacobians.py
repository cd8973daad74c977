"""
Jacobian-field deformation.
Per-face gradient operator on the rest mesh, the area-weighted Poisson
system that integrates a field of per-face Jacobians into vertex positions,
and the adjoint solve that pulls vertex gradients back onto the Jacobians.

Convention: for positions X (V,3) the per-face block G_i X is a 3x3 matrix
whose row k holds the derivative of every coordinate along world axis k,
so G_i X = J_i^T.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from core.errors import FactorizationError, NonFiniteInputError
from core.mesh import TriMesh

logger = logging.getLogger(__name__)

try:
    from sksparse.cholmod import cholesky as _cholmod_cholesky
except ImportError:  # optional; scipy LU is the fallback
    _cholmod_cholesky = None


@dataclass(eq=False)
class GradientOperator:
    """Sparse (3F x V) hat-function gradient operator plus rest face areas."""
    matrix: sp.csr_matrix
    areas: np.ndarray

    @property
    def face_count(self) -> int:
        return len(self.areas)

    @property
    def vertex_count(self) -> int:
        return self.matrix.shape[1]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Per-face gradients of a vertex function: (V,) -> (F,3) or (V,C) -> (F,3,C)."""
        out = self.matrix @ values
        if values.ndim == 1:
            return out.reshape(-1, 3)
        return out.reshape(-1, 3, values.shape[1])

    @property
    def mass(self) -> np.ndarray:
        """Face areas repeated per gradient component, (3F,)."""
        return np.repeat(self.areas, 3)


@dataclass(eq=False)
class PoissonSystem:
    """
    Normal equations Lmat = G^T M G with one pinned vertex.
    The free block is factored once; solve() and adjoint() reuse it.
    """
    lmat: sp.csr_matrix
    pin: int
    pin_position: np.ndarray
    free: np.ndarray
    lmat_ff: sp.csc_matrix
    lmat_fp: sp.csr_matrix
    backend: str
    _solve: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def solve_free(self, rhs: np.ndarray) -> np.ndarray:
        """Back-substitution on the factored free block; rhs (V-1,) or (V-1,C)."""
        return np.asarray(self._solve(np.ascontiguousarray(rhs, dtype=np.float64)))

    def residual(self, x: np.ndarray, rhs: np.ndarray) -> float:
        r = self.lmat_ff @ x - rhs
        return float(np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300))


def gradient_operator(mesh: TriMesh) -> GradientOperator:
    """Hat-function gradients: grad(phi_a) = n x (x_c - x_b) / (2A), cyclically."""
    a, b, c = mesh.corners()
    cross = np.cross(b - a, c - a)
    double_area = np.linalg.norm(cross, axis=1)
    n = cross / double_area[:, None]

    grads = [
        np.cross(n, c - b) / double_area[:, None],
        np.cross(n, a - c) / double_area[:, None],
        np.cross(n, b - a) / double_area[:, None],
    ]
    F = mesh.face_count
    # rows[i, corner, k] = 3i + k
    rows = np.broadcast_to((3 * np.arange(F))[:, None, None] + np.arange(3)[None, None, :], (F, 3, 3))
    cols = np.broadcast_to(mesh.faces[:, :, None], (F, 3, 3))
    vals = np.stack(grads, axis=1)  # (F, corner, k)

    G = sp.csr_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())),
        shape=(3 * F, mesh.vertex_count),
    )
    return GradientOperator(matrix=G, areas=0.5 * double_area)


def _factor(matrix: sp.csc_matrix):
    if _cholmod_cholesky is not None:
        try:
            factor = _cholmod_cholesky(matrix)
            return factor, "cholmod"
        except Exception as e:
            raise FactorizationError(f"Cholesky factorization failed: {e}") from e

    from scipy.sparse.linalg import splu

    try:
        lu = splu(matrix)
    except RuntimeError as e:
        raise FactorizationError(f"LU factorization failed: {e}") from e
    return lu.solve, "splu"


def build_system(rest_mesh: TriMesh):
    """
    Build (GradientOperator, PoissonSystem) from the rest mesh.
    The lowest-index vertex is pinned at its rest position.
    """
    rest_mesh.check_areas()
    op = gradient_operator(rest_mesh)

    V = rest_mesh.vertex_count
    adjacency = sp.coo_matrix(
        (np.ones(3 * rest_mesh.face_count),
         (rest_mesh.faces.ravel(), np.roll(rest_mesh.faces, -1, axis=1).ravel())),
        shape=(V, V),
    )
    n_components, _ = connected_components(adjacency, directed=False)
    if n_components > 1:
        raise FactorizationError(
            f"mesh has {n_components} connected components; a single pinned vertex "
            "leaves the system singular"
        )

    G = op.matrix
    lmat = (G.T @ sp.diags(op.mass) @ G).tocsr()
    lmat = 0.5 * (lmat + lmat.T)

    pin = 0
    free = np.arange(1, V)
    lmat_ff = lmat[free][:, free].tocsc()
    lmat_fp = lmat[free][:, [pin]].tocsr()

    solver, backend = _factor(lmat_ff)
    system = PoissonSystem(
        lmat=lmat.tocsr(),
        pin=pin,
        pin_position=rest_mesh.vertices[pin].copy(),
        free=free,
        lmat_ff=lmat_ff,
        lmat_fp=lmat_fp,
        backend=backend,
        _solve=solver,
    )
    logger.debug("Poisson system: %d vertices, %d faces, backend=%s", V, rest_mesh.face_count, backend)
    return op, system


def identity_jacobians(face_count: int) -> np.ndarray:
    return np.tile(np.eye(3), (face_count, 1, 1))


def face_jacobians(op: GradientOperator, positions: np.ndarray) -> np.ndarray:
    """Achieved per-face Jacobians of a vertex embedding, (F,3,3)."""
    blocks = op.apply(np.asarray(positions, dtype=np.float64))  # (F,3,3) = J^T
    return blocks.transpose(0, 2, 1)


def _check_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteInputError(f"{name} contains non-finite values")


def solve_positions(system: PoissonSystem, op: GradientOperator, jacobians: np.ndarray) -> np.ndarray:
    """Least-squares integration of per-face Jacobians (F,3,3) into positions (V,3)."""
    jacobians = np.asarray(jacobians, dtype=np.float64)
    if jacobians.shape != (op.face_count, 3, 3):
        raise ValueError(f"expected Jacobians of shape {(op.face_count, 3, 3)}, got {jacobians.shape}")
    _check_finite("Jacobian field", jacobians)

    target = jacobians.transpose(0, 2, 1).reshape(-1, 3)
    rhs = op.matrix.T @ (op.mass[:, None] * target)
    rhs_free = rhs[system.free] - system.lmat_fp @ system.pin_position[None, :]

    positions = np.empty((op.vertex_count, 3))
    positions[system.pin] = system.pin_position
    positions[system.free] = system.solve_free(rhs_free)
    return positions


def adjoint_gradient(system: PoissonSystem, op: GradientOperator, dl_dv: np.ndarray) -> np.ndarray:
    """
    Pull a vertex-space gradient (V,3) back to the Jacobians (F,3,3) with one
    solve on the same factorization. The pinned row carries no gradient.
    """
    dl_dv = np.asarray(dl_dv, dtype=np.float64)
    if dl_dv.shape != (op.vertex_count, 3):
        raise ValueError(f"expected gradient of shape {(op.vertex_count, 3)}, got {dl_dv.shape}")
    _check_finite("vertex gradient", dl_dv)

    lam = np.zeros_like(dl_dv)
    lam[system.free] = system.solve_free(dl_dv[system.free])
    dl_dt = op.mass[:, None] * (op.matrix @ lam)
    return dl_dt.reshape(-1, 3, 3).transpose(0, 2, 1)
