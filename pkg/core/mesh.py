"""
Mesh module.
Triangle mesh representation, OBJ I/O, boundary-loop extraction and
mesh-quality measurement.
"""

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from config import MIN_FACE_AREA
from core.errors import (
    DegenerateFaceError,
    NonManifoldEdgeError,
    ObjParseError,
    ZeroExtentError,
)

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    Indexed triangle mesh with optional per-corner UVs.
    Arrays are read-only after construction; deformation produces a new
    TriMesh through with_vertices() that shares faces and UVs.
    """
    vertices: np.ndarray
    faces: np.ndarray
    uvs: Optional[np.ndarray] = None
    uv_faces: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError(
                f"face index out of range: vertex count is {len(v)}, "
                f"max index {int(f.max())}"
            )
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

        if (self.uvs is None) != (self.uv_faces is None):
            raise ValueError("uvs and uv_faces must be given together")
        if self.uvs is not None:
            uv = np.array(self.uvs, dtype=np.float64).reshape(-1, 2)
            uf = np.array(self.uv_faces, dtype=np.int64).reshape(-1, 3)
            if uf.shape != f.shape:
                raise ValueError("uv_faces must have one UV triple per face")
            if uf.size and (uf.min() < 0 or uf.max() >= len(uv)):
                raise ValueError(
                    f"uv index out of range: uv count is {len(uv)}, max index {int(uf.max())}"
                )
            object.__setattr__(self, "uvs", _frozen(uv))
            object.__setattr__(self, "uv_faces", _frozen(uf))

    # ── Basic properties ─────────────────────────────────────────────────

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def has_uvs(self) -> bool:
        return self.uvs is not None

    def corners(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-face corner positions (F,3) x 3."""
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals (b-a)x(c-a); length is twice the area."""
        a, b, c = self.corners()
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        n = self.face_cross()
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(length, 1e-300)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        n = self.face_cross()
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], n)
        length = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.maximum(length, 1e-300)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E,2), each row sorted ascending."""
        return unique_edges(self.faces)[0]

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def bounding_radius(self, center: Optional[np.ndarray] = None) -> float:
        """Radius of the bounding sphere about the vertex centroid."""
        if center is None:
            center = self.centroid()
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices - center, axis=1).max())

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def with_vertices(self, vertices: np.ndarray, name: Optional[str] = None) -> "TriMesh":
        """Same connectivity and UVs, new positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError(
                f"vertex array shape {vertices.shape} does not match {self.vertices.shape}"
            )
        return TriMesh(
            vertices=vertices.copy(),
            faces=self.faces,
            uvs=self.uvs,
            uv_faces=self.uv_faces,
            name=self.name if name is None else name,
        )

    def check_areas(self, threshold: float = MIN_FACE_AREA) -> None:
        """Raise DegenerateFaceError if any face area is <= threshold."""
        bad = np.nonzero(self.face_areas() <= threshold)[0]
        if len(bad):
            raise DegenerateFaceError(bad, threshold)

    def content_hash(self) -> str:
        """SHA-256 over positions, faces and UVs."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        if self.uvs is not None:
            h.update(np.ascontiguousarray(self.uvs, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(self.uv_faces, dtype="<i8").tobytes())
        return h.hexdigest()


def unique_edges(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Unique undirected edges of a face list.
    Returns (edges (E,2) sorted rows, inverse (3F,) mapping each half-edge
    f*3+k -> edge id, counts (E,) incident-face counts).
    Half-edge k of face f runs from faces[f,k] to faces[f,(k+1)%3].
    """
    faces = np.asarray(faces, dtype=np.int64)
    half = np.stack([faces, np.roll(faces, -1, axis=1)], axis=2).reshape(-1, 2)
    keyed = np.sort(half, axis=1)
    edges, inverse, counts = np.unique(keyed, axis=0, return_inverse=True, return_counts=True)
    return edges, inverse.reshape(-1), counts


# ── OBJ I/O ───────────────────────────────────────────────────────────────

def _parse_index(token: str, count: int, kind: str, line_number: int, path: str) -> int:
    try:
        idx = int(token)
    except ValueError:
        raise ObjParseError(f"invalid {kind} index '{token}'", line_number, path)
    if idx < 0:
        raise ObjParseError(f"negative {kind} index {idx} is not supported", line_number, path)
    if idx == 0:
        raise ObjParseError(f"{kind} index 0 is invalid (OBJ is 1-based)", line_number, path)
    return idx - 1


def load_obj(path, name: Optional[str] = None) -> TriMesh:
    """
    Load an ASCII OBJ file. Polygons with more than 3 corners are
    fan-triangulated; vn records are ignored.
    """
    path = Path(path)
    vertices: List[List[float]] = []
    uvs: List[List[float]] = []
    faces: List[List[int]] = []
    uv_faces: List[Optional[List[int]]] = []
    face_lines: List[int] = []

    with open(path, "r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]

            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError("vertex record needs 3 coordinates", line_number, str(path))
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ObjParseError("non-numeric vertex coordinate", line_number, str(path))

            elif tag == "vt":
                if len(parts) < 3:
                    raise ObjParseError("texture record needs 2 coordinates", line_number, str(path))
                try:
                    uvs.append([float(x) for x in parts[1:3]])
                except ValueError:
                    raise ObjParseError("non-numeric texture coordinate", line_number, str(path))

            elif tag == "f":
                corners = parts[1:]
                if len(corners) < 3:
                    raise ObjParseError("face needs at least 3 corners", line_number, str(path))
                v_idx, t_idx = [], []
                for corner in corners:
                    fields = corner.split("/")
                    v_idx.append(_parse_index(fields[0], len(vertices), "vertex", line_number, str(path)))
                    if len(fields) > 1 and fields[1]:
                        t_idx.append(_parse_index(fields[1], len(uvs), "uv", line_number, str(path)))
                if t_idx and len(t_idx) != len(v_idx):
                    raise ObjParseError("face mixes corners with and without uv", line_number, str(path))
                # fan triangulation
                for k in range(1, len(v_idx) - 1):
                    faces.append([v_idx[0], v_idx[k], v_idx[k + 1]])
                    uv_faces.append([t_idx[0], t_idx[k], t_idx[k + 1]] if t_idx else None)
                    face_lines.append(line_number)

            # vn, o, g, s, usemtl, mtllib: ignored

    if not faces:
        raise ObjParseError("no faces found", None, str(path))

    face_arr = np.array(faces, dtype=np.int64)
    out_of_range = np.nonzero(face_arr.max(axis=1) >= len(vertices))[0]
    if len(out_of_range):
        bad = int(out_of_range[0])
        raise ObjParseError(
            f"vertex index {int(face_arr[bad].max()) + 1} out of range "
            f"({len(vertices)} vertices)",
            face_lines[bad],
            str(path),
        )

    has_uv = [t is not None for t in uv_faces]
    uv_arr = None
    uv_face_arr = None
    if any(has_uv):
        if not all(has_uv):
            bad = has_uv.index(False)
            raise ObjParseError("some faces lack uv indices", face_lines[bad], str(path))
        uv_face_arr = np.array(uv_faces, dtype=np.int64)
        uv_bad = np.nonzero(uv_face_arr.max(axis=1) >= len(uvs))[0]
        if len(uv_bad):
            bad = int(uv_bad[0])
            raise ObjParseError(
                f"uv index {int(uv_face_arr[bad].max()) + 1} out of range ({len(uvs)} uvs)",
                face_lines[bad],
                str(path),
            )
        uv_arr = np.array(uvs, dtype=np.float64)

    mesh = TriMesh(
        vertices=np.array(vertices, dtype=np.float64).reshape(-1, 3),
        faces=face_arr,
        uvs=uv_arr,
        uv_faces=uv_face_arr,
        name=name or path.stem,
    )
    mesh.check_areas()
    logger.debug("Loaded %s: %d vertices, %d faces", path.name, mesh.vertex_count, mesh.face_count)
    return mesh


def save_obj(mesh: TriMesh, path, mtl_name: Optional[str] = None, material: str = "garment") -> None:
    """Write an ASCII OBJ; vertex order and indices are preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
    lines.extend("v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices)
    if mesh.has_uvs:
        lines.extend("vt %.17g %.17g" % tuple(t) for t in mesh.uvs)
        if mtl_name:
            lines.append(f"usemtl {material}")
        for f, t in zip(mesh.faces + 1, mesh.uv_faces + 1):
            lines.append(f"f {f[0]}/{t[0]} {f[1]}/{t[1]} {f[2]}/{t[2]}")
    else:
        lines.extend(f"f {f[0]} {f[1]} {f[2]}" for f in mesh.faces + 1)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_mtl(path, texture_name: str, material: str = "garment") -> None:
    path = Path(path)
    path.write_text(
        f"newmtl {material}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nd 1\nillum 1\nmap_Kd {texture_name}\n",
        encoding="utf-8",
    )


# ── Topology ──────────────────────────────────────────────────────────────

@dataclass
class BoundaryLoops:
    """Closed boundary cycles; each loop starts at its smallest vertex index."""
    loops: List[List[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loops)

    def as_sets(self) -> List[frozenset]:
        return sorted((frozenset(loop) for loop in self.loops), key=min)

    @property
    def edge_count(self) -> int:
        return sum(len(loop) for loop in self.loops)


def _trace_boundary(mesh: TriMesh, edges: np.ndarray, inverse: np.ndarray, counts: np.ndarray) -> List[List[int]]:
    """Walk the boundary edges (count == 1) into cycles, consuming each edge once."""
    boundary_ids = np.nonzero(counts == 1)[0]
    if not len(boundary_ids):
        return []

    # orientation of each boundary edge as it appears in its face
    half = np.stack([mesh.faces, np.roll(mesh.faces, -1, axis=1)], axis=2).reshape(-1, 2)
    directed = {}
    for h, e in enumerate(inverse):
        if counts[e] == 1:
            directed[int(e)] = (int(half[h, 0]), int(half[h, 1]))

    incident: Dict[int, List[int]] = defaultdict(list)
    for e in boundary_ids:
        a, b = edges[e]
        incident[int(a)].append(int(e))
        incident[int(b)].append(int(e))

    non_manifold = [v for v, es in incident.items() if len(es) > 2]
    if non_manifold:
        logger.warning("%d non-manifold boundary vertices (e.g. %s)", len(non_manifold), sorted(non_manifold)[:5])

    remaining = set(int(e) for e in boundary_ids)

    def next_edge(vertex: int) -> Optional[Tuple[int, int]]:
        candidates = []
        for e in incident[vertex]:
            if e not in remaining:
                continue
            a, b = directed[e]
            other = b if a == vertex else a
            forward = 0 if a == vertex else 1
            candidates.append((forward, other, e))
        if not candidates:
            return None
        _, other, e = min(candidates)
        return e, other

    loops = []
    while remaining:
        start = min(min(edges[e]) for e in remaining)
        start = int(start)
        loop = [start]
        current = start
        while True:
            step = next_edge(current)
            if step is None:
                break
            e, other = step
            remaining.discard(e)
            if other == start:
                break
            loop.append(other)
            current = other
        loops.append(loop)
    loops.sort(key=lambda lp: lp[0])
    return loops


def boundary_loops(mesh: TriMesh) -> BoundaryLoops:
    """
    Extract all boundary cycles (garment openings).
    Raises NonManifoldEdgeError if any edge has more than two incident faces.
    """
    edges, inverse, counts = unique_edges(mesh.faces)
    bad = np.nonzero(counts > 2)[0]
    if len(bad):
        raise NonManifoldEdgeError(edges[bad])
    return BoundaryLoops(_trace_boundary(mesh, edges, inverse, counts))


# ── Quality ───────────────────────────────────────────────────────────────

@dataclass
class MeshQualityReport:
    min_triangle_area: float
    min_interior_angle: float          # degrees
    max_aspect_ratio: float
    edge_length_mean: float
    edge_length_std: float
    boundary_loop_count: int
    self_intersection_count: int
    degenerate_face_count: int = 0

    def to_dict(self) -> dict:
        return {
            "min_triangle_area": self.min_triangle_area,
            "min_interior_angle": self.min_interior_angle,
            "max_aspect_ratio": self.max_aspect_ratio,
            "edge_length_mean": self.edge_length_mean,
            "edge_length_std": self.edge_length_std,
            "boundary_loop_count": self.boundary_loop_count,
            "self_intersection_count": self.self_intersection_count,
            "degenerate_face_count": self.degenerate_face_count,
        }


_ASPECT_CAP = 1e12
_COPLANAR_TOL = 1e-9               # x bounding radius


def interior_angles(mesh: TriMesh) -> np.ndarray:
    """(F,3) interior angles in degrees, angle k at corner k."""
    a, b, c = mesh.corners()
    out = np.zeros((mesh.face_count, 3))
    for k, (p, q, r) in enumerate(((a, b, c), (b, c, a), (c, a, b))):
        u = q - p
        w = r - p
        cosang = np.einsum("ij,ij->i", u, w) / np.maximum(
            np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1), 1e-300
        )
        out[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def aspect_ratios(mesh: TriMesh) -> np.ndarray:
    """Longest edge over (2*sqrt(3) * inradius); 1 for an equilateral triangle."""
    a, b, c = mesh.corners()
    lengths = np.stack(
        [np.linalg.norm(b - a, axis=1), np.linalg.norm(c - b, axis=1), np.linalg.norm(a - c, axis=1)],
        axis=1,
    )
    area = mesh.face_areas()
    perimeter = lengths.sum(axis=1)
    inradius = 2.0 * area / np.maximum(perimeter, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = lengths.max(axis=1) / (2.0 * np.sqrt(3.0) * inradius)
    ratio = np.where(np.isfinite(ratio), ratio, _ASPECT_CAP)
    return np.minimum(ratio, _ASPECT_CAP)


def _segment_hits_triangle(p0, p1, a, b, c, eps: float = 1e-12) -> np.ndarray:
    """Vectorized segment/triangle intersection (Moller-Trumbore on the segment)."""
    d = p1 - p0
    e1 = b - a
    e2 = c - a
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = p0 - a
    u = inv * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = inv * np.einsum("ij,ij->i", d, q)
    t = inv * np.einsum("ij,ij->i", e2, q)
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t <= 1)


def _orient2d(p: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])


def _inside2d(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    d1, d2, d3 = _orient2d(a, b, p), _orient2d(b, c, p), _orient2d(c, a, p)
    return ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))


def _coplanar_overlap(first, second) -> np.ndarray:
    """Overlap of coplanar triangle pairs in 2-D: crossing edges or a corner inside the other."""
    a, b, c = first
    normal = np.cross(b - a, c - a)
    # drop the coordinate the shared plane is most nearly perpendicular to
    kept_axes = np.array([[1, 2], [0, 2], [0, 1]])[np.argmax(np.abs(normal), axis=1)]
    rows = np.arange(len(a))[:, None]
    flat1 = [p[rows, kept_axes] for p in first]
    flat2 = [p[rows, kept_axes] for p in second]

    hit = np.zeros(len(a), dtype=bool)
    for p in flat1:
        hit |= _inside2d(p, *flat2)
    for p in flat2:
        hit |= _inside2d(p, *flat1)
    for k in range(3):
        p, q = flat1[k], flat1[(k + 1) % 3]
        for m in range(3):
            r, s = flat2[m], flat2[(m + 1) % 3]
            hit |= (_orient2d(p, q, r) * _orient2d(p, q, s) < 0) & (_orient2d(r, s, p) * _orient2d(r, s, q) < 0)
    return hit


def candidate_face_pairs(mesh: TriMesh) -> np.ndarray:
    """
    Broad phase: face pairs (i<j) with overlapping bounding boxes that share
    no vertex. Uses a centroid KD-tree radius query as a superset filter.
    """
    if mesh.face_count < 2:
        return np.zeros((0, 2), dtype=np.int64)
    a, b, c = mesh.corners()
    centers = (a + b + c) / 3.0
    radii = np.max(
        np.stack([np.linalg.norm(p - centers, axis=1) for p in (a, b, c)], axis=1), axis=1
    )
    tree = cKDTree(centers)
    pairs = tree.query_pairs(r=2.0 * float(radii.max()) + 1e-12, output_type="ndarray")
    if not len(pairs):
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs, axis=1)

    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    i, j = pairs[:, 0], pairs[:, 1]
    overlap = np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    fi = mesh.faces[i]
    fj = mesh.faces[j]
    shares = (fi[:, :, None] == fj[:, None, :]).any(axis=(1, 2))
    keep = overlap & ~shares
    out = pairs[keep]
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def count_self_intersections(mesh: TriMesh, chunk: int = 200_000) -> int:
    """
    Number of face pairs sharing no vertex whose triangles intersect, coplanar
    overlaps included. Pairs that share a vertex are never counted, so a fold
    through a common corner goes unreported.
    """
    pairs = candidate_face_pairs(mesh)
    if not len(pairs):
        return 0
    a, b, c = mesh.corners()
    normals = np.cross(b - a, c - a)
    scale = max(mesh.bounding_radius(), 1e-300)
    solid = np.linalg.norm(normals, axis=1) > _COPLANAR_TOL * scale * scale
    total = 0
    for start in range(0, len(pairs), chunk):
        i = pairs[start:start + chunk, 0]
        j = pairs[start:start + chunk, 1]
        hit = np.zeros(len(i), dtype=bool)
        for src, dst in ((i, j), (j, i)):
            ta, tb, tc = a[dst], b[dst], c[dst]
            for p, q in ((a[src], b[src]), (b[src], c[src]), (c[src], a[src])):
                hit |= _segment_hits_triangle(p, q, ta, tb, tc)

        # segments lying in the other triangle's plane are invisible to the test above
        unit = normals[i] / np.maximum(np.linalg.norm(normals[i], axis=1, keepdims=True), 1e-300)
        offsets = np.stack([np.einsum("ij,ij->i", p[j] - a[i], unit) for p in (a, b, c)], axis=1)
        coplanar = ~hit & solid[i] & solid[j] & np.all(np.abs(offsets) <= _COPLANAR_TOL * scale, axis=1)
        if coplanar.any():
            sel = np.nonzero(coplanar)[0]
            first = (a[i[sel]], b[i[sel]], c[i[sel]])
            second = (a[j[sel]], b[j[sel]], c[j[sel]])
            hit[sel] = _coplanar_overlap(first, second)
        total += int(hit.sum())
    return total


def quality_report(mesh: TriMesh) -> MeshQualityReport:
    """Aggregate triangle statistics; degenerate triangles are counted, not raised."""
    areas = mesh.face_areas()
    angles = interior_angles(mesh)
    edges, inverse, counts = unique_edges(mesh.faces)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    loops = _trace_boundary(mesh, edges, inverse, counts)

    return MeshQualityReport(
        min_triangle_area=float(areas.min()) if len(areas) else 0.0,
        min_interior_angle=float(angles.min()) if len(angles) else 0.0,
        max_aspect_ratio=float(aspect_ratios(mesh).max()) if len(areas) else 0.0,
        edge_length_mean=float(lengths.mean()) if len(lengths) else 0.0,
        edge_length_std=float(lengths.std()) if len(lengths) else 0.0,
        boundary_loop_count=len(loops),
        self_intersection_count=count_self_intersections(mesh),
        degenerate_face_count=int((areas <= MIN_FACE_AREA).sum()),
    )


# ── Normalization ─────────────────────────────────────────────────────────

def normalize_to_unit(mesh: TriMesh) -> Tuple[TriMesh, float, np.ndarray]:
    """
    Center at the vertex centroid and scale to bounding-sphere radius 1.
    Returns (normalized, scale, translation) with
    normalized = (v + translation) * scale; invert with denormalize().
    """
    if not mesh.vertex_count:
        raise ZeroExtentError("cannot normalize an empty mesh")
    center = mesh.centroid()
    radius = mesh.bounding_radius(center)
    if radius <= 0.0 or not np.isfinite(radius):
        raise ZeroExtentError(f"mesh '{mesh.name}' has zero extent")
    translation = -center
    scale = 1.0 / radius
    return mesh.with_vertices((mesh.vertices + translation) * scale), scale, translation


def denormalize(mesh: TriMesh, scale: float, translation: np.ndarray) -> TriMesh:
    return mesh.with_vertices(mesh.vertices / scale - np.asarray(translation))
