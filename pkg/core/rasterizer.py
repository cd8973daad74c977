"""
Soft rasterizer.
Z-buffered rasterization of depth, camera-space normals and face ids, a soft
silhouette whose coverage varies smoothly with vertex positions near
silhouette edges, and the analytic backward pass for all three buffers.

Pixel (row i, col j) samples the point (j + 0.5, i + 0.5) in pixel coords.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from core.camera import Camera
from core.errors import RenderError, ResolutionMismatchError
from core.mesh import TriMesh, unique_edges

logger = logging.getLogger(__name__)

_MAX_PAIRS = 2_000_000        # (face, pixel) pairs evaluated per chunk


@dataclass
class RenderBuffers:
    silhouette: np.ndarray            # (H,W) in [0,1]
    normals: np.ndarray               # (H,W,3) camera space, 0 where empty
    depth: np.ndarray                 # (H,W) meters, +inf where empty
    face_ids: np.ndarray              # (H,W) winning face, -1 where empty
    bary: np.ndarray                  # (H,W,3) perspective-correct barycentrics

    @property
    def resolution(self):
        h, w = self.silhouette.shape
        return w, h

    @property
    def mask(self) -> np.ndarray:
        return self.face_ids >= 0


@dataclass
class BufferGradients:
    """Upstream gradients of a scalar loss w.r.t. render buffers; None = zero."""
    silhouette: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    return x * x * (3.0 - 2.0 * x)


def silhouette_half_edges(faces: np.ndarray, visible: np.ndarray, signed_area: np.ndarray) -> np.ndarray:
    """
    (F,3) flags: half-edge k of face f (faces[f,k] -> faces[f,k+1]) lies on the
    projected silhouette. True for mesh boundary edges, edges whose neighbour
    was dropped, and edges whose neighbour faces the other way on screen.
    """
    F = len(faces)
    _, inverse, counts = unique_edges(faces)
    order = np.argsort(inverse, kind="stable")
    e_sorted = inverse[order]
    other = np.full(3 * F, -1, dtype=np.int64)
    paired = np.nonzero(e_sorted[:-1] == e_sorted[1:])[0]
    paired = paired[counts[e_sorted[paired]] == 2]
    other[order[paired]] = order[paired + 1] // 3
    other[order[paired + 1]] = order[paired] // 3

    own_sign = np.repeat(np.sign(signed_area), 3)
    nb = np.where(other >= 0, other, 0)
    nb_ok = (other >= 0) & visible[nb]
    same_side = nb_ok & (np.sign(signed_area[nb]) == own_sign) & (own_sign != 0)
    return (~same_side).reshape(F, 3)


class Rasterization:
    """One rasterization pass of a mesh through a camera; owns forward and backward."""

    def __init__(self, mesh: TriMesh, camera: Camera, softness: float):
        if softness < 0:
            raise RenderError(f"softness must be >= 0, got {softness}")
        self.mesh = mesh
        self.camera = camera
        self.softness = float(softness)
        self.width, self.height = camera.resolution

        self.cam_vertices = camera.to_camera(mesh.vertices)
        self.screen, self.vertex_depth = camera.project(mesh.vertices)

        corners_depth = self.vertex_depth[mesh.faces]
        self.visible = np.all(corners_depth > camera.near, axis=1) & np.all(corners_depth < camera.far, axis=1)

        p = self.screen[mesh.faces]                          # (F,3,2)
        self.signed_area = _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        self.visible &= np.abs(self.signed_area) > 1e-12
        self.silhouette_edges = silhouette_half_edges(mesh.faces, self.visible, self.signed_area)

        cv = self.cam_vertices[mesh.faces]
        self.face_cross = np.cross(cv[:, 1] - cv[:, 0], cv[:, 2] - cv[:, 0])   # camera-space N

        self._run()

    # ── Forward ──────────────────────────────────────────────────────────

    def _pairs(self, faces: np.ndarray, pad: float):
        """Face/pixel pairs over each face's padded screen bounding box."""
        p = self.screen[self.mesh.faces[faces]]
        lo = p.min(axis=1) - pad
        hi = p.max(axis=1) + pad
        j0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, self.width).astype(np.int64)
        j1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, self.width - 1).astype(np.int64)
        i0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, self.height).astype(np.int64)
        i1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, self.height - 1).astype(np.int64)
        nx = np.maximum(j1 - j0 + 1, 0)
        ny = np.maximum(i1 - i0 + 1, 0)
        return j0, i0, nx, ny

    def _chunks(self, faces: np.ndarray, counts: np.ndarray):
        start = 0
        while start < len(faces):
            total = np.cumsum(counts[start:])
            stop = start + max(1, int(np.searchsorted(total, _MAX_PAIRS, side="right")))
            yield slice(start, stop)
            start = stop

    def _run(self):
        H, W = self.height, self.width
        n_pix = H * W
        s = self.softness
        faces_all = self.mesh.faces

        self.depth = np.full(n_pix, np.inf)
        self.face_ids = np.full(n_pix, -1, dtype=np.int64)
        self.lam = np.zeros((n_pix, 3))
        self.coverage = np.zeros(n_pix)
        # silhouette winner bookkeeping for the backward pass
        self.cov_face = np.full(n_pix, -1, dtype=np.int64)
        self.cov_edge = np.zeros(n_pix, dtype=np.int64)
        self.cov_t = np.zeros(n_pix)
        self.cov_dir = np.zeros((n_pix, 2))
        self.cov_slope = np.zeros(n_pix)

        faces = np.nonzero(self.visible)[0]
        if not len(faces):
            return
        pad = 0.5 * s + 1.0
        j0, i0, nx, ny = self._pairs(faces, pad)
        counts = nx * ny

        for sl in self._chunks(faces, counts):
            self._rasterize_chunk(faces[sl], j0[sl], i0[sl], nx[sl], ny[sl], faces_all)

    def _rasterize_chunk(self, faces, j0, i0, nx, ny, faces_all):
        counts = nx * ny
        total = int(counts.sum())
        if total == 0:
            return
        s = self.softness
        W = self.width

        owner = np.repeat(np.arange(len(faces)), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        jj = j0[owner] + local % nx[owner]
        ii = i0[owner] + local // nx[owner]
        f = faces[owner]
        pix = ii * W + jj
        q = np.stack([jj + 0.5, ii + 0.5], axis=1)

        p = self.screen[faces_all[f]]                  # (P,3,2)
        area = self.signed_area[f]
        edge = np.roll(p, -1, axis=1) - p              # edge k: p_k -> p_{k+1}
        rel = q[:, None, :] - p                        # q - p_k
        w = _cross2(edge, rel)                         # (P,3)
        side = w / area[:, None]                       # >= 0 inside half-plane
        inside = np.all(side >= 0.0, axis=1)

        # ── z-buffer ──
        lam = np.stack([side[:, 1], side[:, 2], side[:, 0]], axis=1)   # opposite-edge weights
        zc = self.vertex_depth[faces_all[f]]
        inv = np.einsum("ij,ij->i", lam, 1.0 / zc)
        with np.errstate(divide="ignore"):
            t = np.where(inside, 1.0 / inv, np.inf)
        hit = np.nonzero(inside)[0]
        if len(hit):
            order = hit[np.lexsort((f[hit], t[hit], pix[hit]))]
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix[order][1:] != pix[order][:-1]
            win = order[first]
            better = t[win] < self.depth[pix[win]]
            win = win[better]
            self.depth[pix[win]] = t[win]
            self.face_ids[pix[win]] = f[win]
            self.lam[pix[win]] = lam[win]

        # ── soft coverage ──
        length = np.linalg.norm(edge, axis=2)
        length = np.maximum(length, 1e-300)
        sil = self.silhouette_edges[f]
        line_dist = np.abs(w) / length
        t_line = np.einsum("pkd,pkd->pk", rel, edge) / (length ** 2)
        t_seg = np.clip(t_line, 0.0, 1.0)
        seg_vec = rel - t_seg[..., None] * edge
        seg_dist = np.linalg.norm(seg_vec, axis=2)

        big = np.inf
        in_d = np.where(sil, line_dist, big)
        out_d = np.where(sil & (side < 0.0), seg_dist, big)
        k_in = np.argmin(in_d, axis=1)
        k_out = np.argmin(out_d, axis=1)
        rows = np.arange(total)
        k = np.where(inside, k_in, k_out)
        dist = np.where(inside, in_d[rows, k_in], out_d[rows, k_out])
        signed = np.where(inside, dist, -dist)

        if s == 0.0:
            cov = inside.astype(np.float64)
            slope = np.zeros(total)
        else:
            x = np.clip(0.5 + signed / s, 0.0, 1.0)
            cov = _smoothstep(x)
            live = (x > 0.0) & (x < 1.0)
            slope = np.where(live, 6.0 * x * (1.0 - x) / s, 0.0)

        t_used = np.where(inside, t_line[rows, k], t_seg[rows, k])
        foot = p[rows, k] + t_used[:, None] * edge[rows, k]
        direction = q - foot
        norm = np.linalg.norm(direction, axis=1)
        inward = np.sign(area)[:, None] * np.stack([-edge[rows, k, 1], edge[rows, k, 0]], axis=1) / length[rows, k][:, None]
        direction = np.where(norm[:, None] > 1e-12, direction / np.maximum(norm, 1e-300)[:, None],
                             np.where(inside[:, None], inward, -inward))

        cand = np.nonzero(cov > 0.0)[0]
        if not len(cand):
            return
        order = cand[np.lexsort((f[cand], -cov[cand], pix[cand]))]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        win = order[first]
        better = cov[win] > self.coverage[pix[win]]
        win = win[better]
        tgt = pix[win]
        self.coverage[tgt] = cov[win]
        self.cov_face[tgt] = f[win]
        self.cov_edge[tgt] = k[win]
        self.cov_t[tgt] = t_used[win]
        # sign folded in: d(signed)/d(foot) = -sign * direction
        self.cov_dir[tgt] = np.where(inside[win, None], direction[win], -direction[win])
        self.cov_slope[tgt] = slope[win]

    def perspective_bary(self) -> np.ndarray:
        """Perspective-correct barycentrics of the winning face per pixel, (H*W,3)."""
        out = np.zeros_like(self.lam)
        hit = self.face_ids >= 0
        zc = self.vertex_depth[self.mesh.faces[self.face_ids[hit]]]
        out[hit] = self.lam[hit] / zc * self.depth[hit, None]
        return out

    def buffers(self) -> RenderBuffers:
        H, W = self.height, self.width
        normals = np.zeros((H * W, 3))
        hit = self.face_ids >= 0
        if hit.any():
            n = self.face_cross[self.face_ids[hit]]
            normals[hit] = n / np.linalg.norm(n, axis=1, keepdims=True)
        return RenderBuffers(
            silhouette=self.coverage.reshape(H, W).copy(),
            normals=normals.reshape(H, W, 3),
            depth=self.depth.reshape(H, W).copy(),
            face_ids=self.face_ids.reshape(H, W).copy(),
            bary=self.perspective_bary().reshape(H, W, 3),
        )

    # ── Backward ─────────────────────────────────────────────────────────

    def _check(self, name: str, grad: Optional[np.ndarray], shape) -> Optional[np.ndarray]:
        if grad is None:
            return None
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != shape:
            raise ResolutionMismatchError(
                f"{name} gradient has shape {grad.shape}, expected {shape} for resolution {self.camera.resolution}"
            )
        return grad

    def _screen_to_camera(self, g_screen: np.ndarray) -> np.ndarray:
        """Chain (V,2) pixel-coordinate gradients through the projection."""
        f = self.camera.focal
        X, Y, Z = self.cam_vertices[:, 0], self.cam_vertices[:, 1], self.cam_vertices[:, 2]
        D = np.where(np.abs(Z) > 1e-300, -Z, 1e-300)
        gx, gy = g_screen[:, 0], g_screen[:, 1]
        out = np.zeros_like(self.cam_vertices)
        out[:, 0] = gx * f / D
        out[:, 1] = -gy * f / D
        out[:, 2] = gx * f * X / D ** 2 - gy * f * Y / D ** 2
        return out

    def backward(self, grads: BufferGradients) -> np.ndarray:
        H, W = self.height, self.width
        g_sil = self._check("silhouette", grads.silhouette, (H, W))
        g_nrm = self._check("normals", grads.normals, (H, W, 3))
        g_dep = self._check("depth", grads.depth, (H, W))

        V = self.mesh.vertex_count
        faces = self.mesh.faces
        g_cam = np.zeros((V, 3))

        if g_sil is not None and self.softness > 0:
            g = g_sil.reshape(-1) * self.cov_slope
            px = np.nonzero((g != 0.0) & (self.cov_face >= 0))[0]
            if len(px):
                fid = self.cov_face[px]
                k = self.cov_edge[px]
                t = self.cov_t[px]
                d = self.cov_dir[px]
                va = faces[fid, k]
                vb = faces[fid, (k + 1) % 3]
                g_screen = np.zeros((V, 2))
                np.add.at(g_screen, va, -(g[px] * (1.0 - t))[:, None] * d)
                np.add.at(g_screen, vb, -(g[px] * t)[:, None] * d)
                g_cam += self._screen_to_camera(g_screen)

        hit = np.nonzero(self.face_ids >= 0)[0]
        if len(hit) and g_dep is not None:
            gd = g_dep.reshape(-1)[hit]
            fid = self.face_ids[hit]
            N = self.face_cross[fid]
            xy = np.stack([hit % W + 0.5, hit // W + 0.5], axis=1)
            rays = self.camera.pixel_rays(xy)
            beta = self.perspective_bary()[hit]
            scale = gd / np.einsum("ij,ij->i", N, rays)
            for c in range(3):
                np.add.at(g_cam, faces[fid, c], (scale * beta[:, c])[:, None] * N)

        if len(hit) and g_nrm is not None:
            gn = g_nrm.reshape(-1, 3)[hit]
            fid = self.face_ids[hit]
            g_face = np.zeros((self.mesh.face_count, 3))
            np.add.at(g_face, fid, gn)
            used = np.unique(fid)
            N = self.face_cross[used]
            length = np.linalg.norm(N, axis=1, keepdims=True)
            n = N / length
            gN = (g_face[used] - n * np.einsum("ij,ij->i", n, g_face[used])[:, None]) / length
            cv = self.cam_vertices[faces[used]]
            e1 = cv[:, 1] - cv[:, 0]
            e2 = cv[:, 2] - cv[:, 0]
            g_e1 = np.cross(e2, gN)
            g_e2 = np.cross(gN, e1)
            np.add.at(g_cam, faces[used, 1], g_e1)
            np.add.at(g_cam, faces[used, 2], g_e2)
            np.add.at(g_cam, faces[used, 0], -(g_e1 + g_e2))

        # camera = R (world - position)
        return g_cam @ self.camera.rotation


def render(mesh: TriMesh, camera: Camera, softness: float) -> RenderBuffers:
    return Rasterization(mesh, camera, softness).buffers()


def render_backward(mesh: TriMesh, camera: Camera, softness: float, grads: BufferGradients) -> np.ndarray:
    """Gradient (V,3) of a scalar image loss w.r.t. world vertex positions."""
    return Rasterization(mesh, camera, softness).backward(grads)


# ── Shading helpers ───────────────────────────────────────────────────────

def shade_normals(buffers: RenderBuffers) -> np.ndarray:
    """Untextured preview: rgb = silhouette * (0.5 n + 0.5), (H,W,3) in [0,1]."""
    return buffers.silhouette[..., None] * (0.5 * buffers.normals + 0.5)


def shade_normals_backward(buffers: RenderBuffers, g_image: np.ndarray) -> BufferGradients:
    g_image = np.asarray(g_image, dtype=np.float64)
    g_sil = np.einsum("hwc,hwc->hw", g_image, 0.5 * buffers.normals + 0.5)
    g_nrm = 0.5 * buffers.silhouette[..., None] * g_image
    return BufferGradients(silhouette=g_sil, normals=g_nrm)


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup; texel (i,j) centre sits at u=(j+.5)/W, v=1-(i+.5)/H."""
    Ht, Wt = texture.shape[:2]
    x = np.clip(uv[:, 0] * Wt - 0.5, 0.0, Wt - 1.0)
    y = np.clip((1.0 - uv[:, 1]) * Ht - 0.5, 0.0, Ht - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, Wt - 1)
    y1 = np.minimum(y0 + 1, Ht - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bottom = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def render_textured(mesh: TriMesh, camera: Camera, texture: np.ndarray,
                    background: float = 0.0, buffers: Optional[RenderBuffers] = None) -> np.ndarray:
    """Hard-coverage textured render with perspective-correct UVs, (H,W,3)."""
    if not mesh.has_uvs:
        from core.errors import MissingUVError
        raise MissingUVError(f"mesh '{mesh.name}' has no UVs to texture")
    if buffers is None:
        buffers = render(mesh, camera, 0.0)
    H, W = buffers.face_ids.shape
    image = np.full((H * W, 3), float(background))
    fid = buffers.face_ids.reshape(-1)
    hit = fid >= 0
    if hit.any():
        beta = buffers.bary.reshape(-1, 3)[hit]
        corner_uv = mesh.uvs[mesh.uv_faces[fid[hit]]]       # (P,3,2)
        uv = np.einsum("pk,pkd->pd", beta, corner_uv)
        image[hit] = sample_texture(np.asarray(texture, dtype=np.float64), uv)
    return image.reshape(H, W, 3)


# ── Export ────────────────────────────────────────────────────────────────

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_buffers_png(buffers: RenderBuffers, directory, stem: str) -> dict:
    """Write silhouette/normal/depth PNGs; depth range goes to a sidecar JSON."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "silhouette": directory / f"{stem}_silhouette.png",
        "normals": directory / f"{stem}_normals.png",
        "depth": directory / f"{stem}_depth.png",
        "depth_range": directory / f"{stem}_depth.json",
    }
    Image.fromarray(to_uint8(buffers.silhouette)).save(paths["silhouette"])
    normals_rgb = np.where(buffers.mask[..., None], 0.5 * buffers.normals + 0.5, 0.0)
    Image.fromarray(to_uint8(normals_rgb)).save(paths["normals"])

    finite = np.isfinite(buffers.depth)
    lo = float(buffers.depth[finite].min()) if finite.any() else 0.0
    hi = float(buffers.depth[finite].max()) if finite.any() else 0.0
    span = hi - lo if hi > lo else 1.0
    depth01 = np.where(finite, (buffers.depth - lo) / span, 1.0)
    Image.fromarray(to_uint8(depth01)).save(paths["depth"])
    paths["depth_range"].write_text(json.dumps({"min": lo, "max": hi, "empty": "white"}), encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
