"""
Closest-point queries against a triangle mesh.
Exact point-to-triangle distances with a KD-tree candidate filter.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from core.errors import EmptyPointSetError
from core.mesh import TriMesh


@dataclass
class ClosestPoints:
    points: np.ndarray        # (N,3) closest surface points
    face_ids: np.ndarray      # (N,) owning face
    bary: np.ndarray          # (N,3) barycentric weights of the owning face corners
    sq_distances: np.ndarray  # (N,)


def closest_point_on_triangle(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """
    Vectorized closest point on triangles (a,b,c) to points p, all (N,3).
    Returns (points, bary) following the Voronoi-region walk of Ericson's
    Real-Time Collision Detection.
    """
    n = len(p)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)

    def assign(mask, wa, wb, wc):
        m = mask & ~done
        bary[m, 0] = wa[m] if np.ndim(wa) else wa
        bary[m, 1] = wb[m] if np.ndim(wb) else wb
        bary[m, 2] = wc[m] if np.ndim(wc) else wc
        done[m] = True

    # vertex a
    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)

    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)

    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0)

    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)

    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = d2 / (d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0, t_ac)

    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t_bc, t_bc)

    # interior
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    assign(np.ones(n, dtype=bool), 1.0 - v - w, v, w)

    points = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return points, bary


class MeshProximity:
    """
    Closest-point index over a fixed mesh.
    The nearest vertex bounds the surface distance from above; faces whose
    centroid lies within that bound plus the largest centroid-to-corner
    radius are tested exactly.
    """

    def __init__(self, mesh: TriMesh, chunk: int = 4096):
        self.mesh = mesh
        self._chunk = chunk
        a, b, c = mesh.corners()
        self._a, self._b, self._c = a, b, c
        centers = (a + b + c) / 3.0
        self._reach = float(np.max([np.linalg.norm(x - centers, axis=1).max() for x in (a, b, c)]))
        self._vertex_tree = cKDTree(mesh.vertices)
        self._center_tree = cKDTree(centers)

    def query(self, points: np.ndarray) -> ClosestPoints:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not len(points):
            raise EmptyPointSetError("closest-point query needs at least one point")
        parts = [self._query_chunk(points[i:i + self._chunk]) for i in range(0, len(points), self._chunk)]
        return ClosestPoints(
            points=np.concatenate([p.points for p in parts]),
            face_ids=np.concatenate([p.face_ids for p in parts]),
            bary=np.concatenate([p.bary for p in parts]),
            sq_distances=np.concatenate([p.sq_distances for p in parts]),
        )

    def _query_chunk(self, points: np.ndarray) -> ClosestPoints:
        bound, _ = self._vertex_tree.query(points)
        radius = bound + self._reach + 1e-12
        candidates = self._center_tree.query_ball_point(points, r=radius)

        counts = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(points))
        owner = np.repeat(np.arange(len(points)), counts)
        faces = np.fromiter((f for c in candidates for f in c), dtype=np.int64, count=int(counts.sum()))

        q, bary = closest_point_on_triangle(points[owner], self._a[faces], self._b[faces], self._c[faces])
        d2 = np.sum((points[owner] - q) ** 2, axis=1)

        # best per point; ties go to the lowest face id
        order = np.lexsort((faces, d2, owner))
        first = np.ones(len(order), dtype=bool)
        first[1:] = owner[order][1:] != owner[order][:-1]
        best = order[first]
        return ClosestPoints(points=q[best], face_ids=faces[best], bary=bary[best], sq_distances=d2[best])


def closest_points(mesh: TriMesh, points: np.ndarray) -> ClosestPoints:
    return MeshProximity(mesh).query(points)
