"""
Procedural meshes.
Small parametric garments and solids used as fixtures, by make-test-body
and in the acceptance tests.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from core.mesh import TriMesh


def _orient_outward(vertices: np.ndarray, faces: np.ndarray, uv_faces: Optional[np.ndarray] = None,
                    center: Optional[np.ndarray] = None):
    """Flip faces whose normal points toward `center` (star-shaped solids only)."""
    if center is None:
        center = vertices.mean(axis=0)
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, (a + b + c) / 3.0 - center) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    if uv_faces is not None:
        uv_faces = uv_faces.copy()
        uv_faces[inward] = uv_faces[inward][:, [0, 2, 1]]
    return faces, uv_faces


def grid(nx: int = 10, ny: int = 10, size: Tuple[float, float] = (1.0, 1.0), name: str = "grid") -> TriMesh:
    """Planar nx x ny quad grid in the xy-plane, facing +z, with UVs."""
    xs = np.linspace(-size[0] / 2, size[0] / 2, nx + 1)
    ys = np.linspace(-size[1] / 2, size[1] / 2, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    uvs = np.stack([(gx.ravel() - xs[0]) / size[0], (gy.ravel() - ys[0]) / size[1]], axis=1)

    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(vertices, faces, uvs=uvs, uv_faces=faces.copy(), name=name)


def _tube(segments: int, rings: int, radius, height: float):
    """Side wall vertices/faces/uvs of a y-axis tube; radius may vary per ring."""
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (rings + 1,))
    theta = 2 * np.pi * np.arange(segments) / segments
    ys = np.linspace(-height / 2, height / 2, rings + 1)
    vertices = np.stack([
        (radius[:, None] * np.cos(theta)[None, :]).ravel(),
        np.repeat(ys, segments),
        (radius[:, None] * np.sin(theta)[None, :]).ravel(),
    ], axis=1)

    r, s = np.meshgrid(np.arange(rings), np.arange(segments), indexing="ij")
    r, s = r.ravel(), s.ravel()
    a = r * segments + s
    b = r * segments + (s + 1) % segments
    c = (r + 1) * segments + (s + 1) % segments
    d = (r + 1) * segments + s
    faces = np.concatenate([np.stack([a, d, c], 1), np.stack([a, c, b], 1)])

    # uv grid has one extra column so the seam does not wrap
    uvs = np.stack(np.meshgrid(np.arange(segments + 1) / segments, np.arange(rings + 1) / rings), axis=-1).reshape(-1, 2)
    ua = r * (segments + 1) + s
    ub = r * (segments + 1) + s + 1
    uc = (r + 1) * (segments + 1) + s + 1
    ud = (r + 1) * (segments + 1) + s
    uv_faces = np.concatenate([np.stack([ua, ud, uc], 1), np.stack([ua, uc, ub], 1)])
    return vertices, faces, uvs, uv_faces


def open_cylinder(segments: int = 8, rings: int = 4, radius: float = 0.5, height: float = 1.0,
                  name: str = "cylinder") -> TriMesh:
    """Tube open at both ends (two boundary rims), outward normals."""
    vertices, faces, uvs, uv_faces = _tube(segments, rings, radius, height)
    return TriMesh(vertices, faces, uvs=uvs, uv_faces=uv_faces, name=name)


def capped_cylinder(segments: int = 16, rings: int = 8, radius=0.1, height: float = 1.0,
                    name: str = "capped_cylinder") -> TriMesh:
    """Closed tube: side wall plus a fan cap at each end."""
    vertices, faces, _, _ = _tube(segments, rings, radius, height)
    n = len(vertices)
    bottom, top = n, n + 1
    vertices = np.vstack([vertices, [[0.0, -height / 2, 0.0], [0.0, height / 2, 0.0]]])
    s = np.arange(segments)
    last = rings * segments
    caps = np.concatenate([
        np.stack([np.full(segments, bottom), s, (s + 1) % segments], 1),
        np.stack([np.full(segments, top), last + (s + 1) % segments, last + s], 1),
    ])
    faces = np.concatenate([faces, caps])
    center = np.zeros(3)
    cap_faces, _ = _orient_outward(vertices, faces[-2 * segments:], center=center)
    faces[-2 * segments:] = cap_faces
    return TriMesh(vertices, faces, name=name)


_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def icosphere(subdivisions: int = 2, radius: float = 1.0, name: str = "icosphere") -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    vertices = [list(np.asarray(v, dtype=np.float64) / np.linalg.norm(v)) for v in vertices]
    faces = _ICO_FACES.tolist()

    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.asarray(vertices[i]) + np.asarray(vertices[j])) / 2.0
                vertices.append(list(m / np.linalg.norm(m)))
                cache[key] = len(vertices) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = refined

    v = np.asarray(vertices) * radius
    f, _ = _orient_outward(v, np.asarray(faces, dtype=np.int64), center=np.zeros(3))
    return TriMesh(v, f, name=name)


def uv_sphere(n_lat: int = 16, n_lon: int = 32, radius: float = 1.0, name: str = "uv_sphere") -> TriMesh:
    """Latitude/longitude sphere (y up) with an equirectangular UV atlas."""
    lat = np.pi * np.arange(1, n_lat) / n_lat
    lon = 2 * np.pi * np.arange(n_lon) / n_lon
    ring = np.stack([
        (np.sin(lat)[:, None] * np.cos(lon)[None, :]).ravel(),
        np.repeat(np.cos(lat), n_lon),
        (np.sin(lat)[:, None] * np.sin(lon)[None, :]).ravel(),
    ], axis=1)
    vertices = np.vstack([[0, 1, 0], ring, [0, -1, 0]]) * radius
    south = len(vertices) - 1

    def vid(i, j):
        # i = 1..n_lat-1 ring index, j wraps
        return 1 + (i - 1) * n_lon + (j % n_lon)

    def uid(i, j):
        return i * (n_lon + 1) + j

    uvs = np.stack(np.meshgrid(np.arange(n_lon + 1) / n_lon, 1.0 - np.arange(n_lat + 1) / n_lat), axis=-1).reshape(-1, 2)

    faces, uv_faces = [], []
    for j in range(n_lon):
        faces.append([0, vid(1, j + 1), vid(1, j)])
        uv_faces.append([uid(0, j), uid(1, j + 1), uid(1, j)])
        faces.append([south, vid(n_lat - 1, j), vid(n_lat - 1, j + 1)])
        uv_faces.append([uid(n_lat, j), uid(n_lat - 1, j), uid(n_lat - 1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j + 1), vid(i + 1, j)
            ua, ub, uc, ud = uid(i, j), uid(i, j + 1), uid(i + 1, j + 1), uid(i + 1, j)
            faces += [[a, b, c], [a, c, d]]
            uv_faces += [[ua, ub, uc], [ua, uc, ud]]

    f, uf = _orient_outward(vertices, np.asarray(faces), np.asarray(uv_faces), center=np.zeros(3))
    return TriMesh(vertices, f, uvs=uvs, uv_faces=uf, name=name)


def cube(size: float = 1.0, margin: float = 0.02, name: str = "cube") -> TriMesh:
    """Cube with a 6-chart atlas: one non-overlapping UV cell per face on a 3x2 layout."""
    h = size / 2.0
    corners = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])

    def corner_id(p):
        return int(np.nonzero(np.all(np.isclose(corners, p), axis=1))[0][0])

    faces, uv_faces, uvs = [], [], []
    chart = 0
    for axis in range(3):
        u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
        for sign in (-1.0, 1.0):
            quad = []
            for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = np.zeros(3)
                p[axis], p[u_ax], p[v_ax] = sign * h, su * h, sv * h
                quad.append(corner_id(p))
            col, row = chart % 3, chart // 3
            x0, y0 = col / 3.0 + margin, row / 2.0 + margin
            w, hh = 1.0 / 3.0 - 2 * margin, 0.5 - 2 * margin
            base = len(uvs)
            uvs += [[x0, y0], [x0 + w, y0], [x0 + w, y0 + hh], [x0, y0 + hh]]
            faces += [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
            uv_faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
            chart += 1

    f, uf = _orient_outward(corners, np.asarray(faces), np.asarray(uv_faces), center=np.zeros(3))
    return TriMesh(corners, f, uvs=np.asarray(uvs), uv_faces=uf, name=name)


def tetrahedron(name: str = "tetrahedron") -> TriMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f, _ = _orient_outward(v, np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]), center=np.zeros(3))
    return TriMesh(v, f, name=name)


def sleeveless_shirt(segments: int = 24, rings: int = 12, radius: float = 0.25, height: float = 0.7,
                     arm_rings: Sequence[int] = (7, 8, 9), arm_width: int = 2,
                     name: str = "sleeveless_shirt") -> TriMesh:
    """
    Garment-like template: a slightly tapered tube with waist and neck rims
    and two arm holes cut at the sides (four boundary loops).
    """
    taper = radius * (1.0 - 0.15 * np.linspace(0.0, 1.0, rings + 1))
    vertices, faces, uvs, uv_faces = _tube(segments, rings, taper, height)

    cell_ring = np.tile(np.repeat(np.arange(rings), segments), 2)
    cell_seg = np.tile(np.tile(np.arange(segments), rings), 2)
    side = segments // 2
    drop = np.zeros(len(faces), dtype=bool)
    for centre in (0, side):
        segs = [(centre + k) % segments for k in range(-(arm_width // 2), arm_width - arm_width // 2)]
        drop |= np.isin(cell_ring, arm_rings) & np.isin(cell_seg, segs)

    faces = faces[~drop]
    # vertices strictly inside a hole lose all their faces
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(vertices[used], remap[faces], uvs=uvs, uv_faces=uv_faces[~drop], name=name)


def inflate(mesh: TriMesh, offset: float) -> TriMesh:
    """Move every vertex `offset` along its vertex normal."""
    return mesh.with_vertices(mesh.vertices + offset * mesh.vertex_normals(), name=f"{mesh.name}_inflated")


def rotation_y(degrees: float) -> np.ndarray:
    a = np.radians(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
