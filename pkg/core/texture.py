"""
UV texture creation from posed view images.
Texel-to-surface maps, depth-tested backprojection into only-unfilled texels,
greedy largest-region-first view ordering, seam dilation and texture export.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    CAMERA_DISTANCE_FACTOR,
    CAMERA_FOV_DEG,
    DEPTH_TOLERANCE_FACTOR,
    FACING_THRESHOLD,
    LOSS_RESOLUTION,
    NEUTRAL_GRAY,
    TEXEL_CACHE_DIR,
    TEXTURE_DILATION,
    TEXTURE_SIZE,
)
from core.cache import ArrayCache
from core.camera import Camera, load_camera_file, orbit_camera
from core.errors import MissingUVError, RenderError, ResolutionMismatchError
from core.mesh import TriMesh, save_mtl, save_obj
from core.rasterizer import render, to_uint8

logger = logging.getLogger(__name__)

_MAX_PAIRS = 2_000_000
_EDGE_EPS = 1e-9
_RAY_HIT_EPS = 1e-6


# ── Types ─────────────────────────────────────────────────────────────────

@dataclass
class ViewImage:
    rgb: np.ndarray             # (H,W,3) in [0,1]
    camera: Camera
    tag: str

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise RenderError(f"view '{self.tag}': expected an (H,W,3) image, got {self.rgb.shape}")
        h, w = self.rgb.shape[:2]
        if (w, h) != tuple(self.camera.resolution):
            raise ResolutionMismatchError(
                f"view '{self.tag}': image is {w}x{h}, camera expects "
                f"{self.camera.resolution[0]}x{self.camera.resolution[1]}"
            )
        if self.rgb.size and (self.rgb.min() < 0.0 or self.rgb.max() > 1.0):
            raise RenderError(f"view '{self.tag}': pixel values must lie in [0, 1]")


@dataclass
class TexelMap:
    """Surface point behind every texel; face_ids is -1 where no chart covers the texel."""
    face_ids: np.ndarray        # (H,W)
    bary: np.ndarray            # (H,W,3)
    points: np.ndarray          # (H,W,3)
    normals: np.ndarray         # (H,W,3) unit
    overlap_count: int = 0

    @property
    def size(self) -> Tuple[int, int]:
        return self.face_ids.shape

    @property
    def covered(self) -> np.ndarray:
        return self.face_ids >= 0


@dataclass
class TextureAtlas:
    color: np.ndarray           # (H,W,3)
    fill_mask: np.ndarray       # (H,W) bool
    weight: np.ndarray          # (H,W), > 0 exactly where filled
    source: np.ndarray          # (H,W) index of the writing view, -1 if none

    @classmethod
    def empty(cls, size: Tuple[int, int]) -> "TextureAtlas":
        H, W = size
        return cls(np.zeros((H, W, 3)), np.zeros((H, W), dtype=bool), np.zeros((H, W)), np.full((H, W), -1))

    def copy(self) -> "TextureAtlas":
        return TextureAtlas(self.color.copy(), self.fill_mask.copy(), self.weight.copy(), self.source.copy())

    @property
    def size(self) -> Tuple[int, int]:
        return self.fill_mask.shape


@dataclass
class CoverageReport:
    texel_count: int
    chart_texels: int
    projected: int
    dilated: int
    unfilled: int
    overlap_texels: int = 0
    view_order: List[str] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        """Filled fraction of the whole texture after dilation."""
        return 1.0 - self.unfilled / self.texel_count

    @property
    def chart_coverage(self) -> float:
        return self.projected / self.chart_texels if self.chart_texels else 0.0

    def to_dict(self) -> dict:
        return {
            "texel_count": self.texel_count,
            "chart_texels": self.chart_texels,
            "projected": self.projected,
            "dilated": self.dilated,
            "unfilled": self.unfilled,
            "coverage": self.coverage,
            "chart_coverage": self.chart_coverage,
            "overlap_texels": self.overlap_texels,
            "view_order": list(self.view_order),
            # gray texels are where an external enhancer would paint
            "needs_inpainting": self.unfilled > 0,
        }


# ── Texel map ─────────────────────────────────────────────────────────────

def _texture_shape(texture_size) -> Tuple[int, int]:
    if np.isscalar(texture_size):
        return int(texture_size), int(texture_size)
    h, w = texture_size
    return int(h), int(w)


def _build_texel_map(mesh: TriMesh, H: int, W: int) -> Dict[str, np.ndarray]:
    # texel (i,j) centre sits at u=(j+.5)/W, v=1-(i+.5)/H
    uv = mesh.uvs[mesh.uv_faces]                                  # (F,3,2)
    tex = np.stack([uv[..., 0] * W - 0.5, (1.0 - uv[..., 1]) * H - 0.5], axis=-1)
    e1, e2 = tex[:, 1] - tex[:, 0], tex[:, 2] - tex[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    usable = np.nonzero(np.abs(area) > 1e-12)[0]

    lo, hi = tex.min(axis=1), tex.max(axis=1)
    j0 = np.clip(np.ceil(lo[:, 0] - _EDGE_EPS), 0, W).astype(np.int64)
    j1 = np.clip(np.floor(hi[:, 0] + _EDGE_EPS), -1, W - 1).astype(np.int64)
    i0 = np.clip(np.ceil(lo[:, 1] - _EDGE_EPS), 0, H).astype(np.int64)
    i1 = np.clip(np.floor(hi[:, 1] + _EDGE_EPS), -1, H - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)[usable]
    ny = np.maximum(i1 - i0 + 1, 0)[usable]
    counts = nx * ny

    face_ids = np.full(H * W, -1, dtype=np.int64)
    lam = np.zeros((H * W, 3))
    strict_hits = np.zeros(H * W, dtype=np.int64)

    start = 0
    while start < len(usable):
        stop = start + max(1, int(np.searchsorted(np.cumsum(counts[start:]), _MAX_PAIRS, side="right")))
        faces = usable[start:stop]
        c = counts[start:stop]
        owner = np.repeat(np.arange(len(faces)), c)
        local = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
        f = faces[owner]
        jx = j0[f] + local % nx[start:stop][owner]
        iy = i0[f] + local // nx[start:stop][owner]
        start = stop

        p = np.stack([jx, iy], axis=1).astype(np.float64) - tex[f, 0]
        l1 = (p[:, 0] * e2[f, 1] - p[:, 1] * e2[f, 0]) / area[f]
        l2 = (e1[f, 0] * p[:, 1] - e1[f, 1] * p[:, 0]) / area[f]
        bc = np.stack([1.0 - l1 - l2, l1, l2], axis=1)
        inside = np.all(bc >= -_EDGE_EPS, axis=1)
        strictly = np.all(bc > _EDGE_EPS, axis=1)
        pix = iy * W + jx
        np.add.at(strict_hits, pix[strictly], 1)

        # faces arrive in increasing order; the first face to claim a texel keeps it
        pix, f, bc = pix[inside], f[inside], bc[inside]
        order = np.lexsort((f, pix))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix[order][1:] != pix[order][:-1]
        take = order[first]
        free = face_ids[pix[take]] < 0
        take = take[free]
        face_ids[pix[take]] = f[take]
        lam[pix[take]] = bc[take]

    return {"face_ids": face_ids.reshape(H, W), "bary": lam.reshape(H, W, 3),
            "overlap": np.array(int(np.sum(strict_hits > 1)))}


def rasterize_uv_points(mesh: TriMesh, texture_size=TEXTURE_SIZE,
                        cache: Optional[ArrayCache] = None) -> TexelMap:
    """
    Per-texel surface point, interpolated normal and face id from the UV atlas.
    The face/barycentric map depends only on the mesh, so it is cached by
    content hash when a cache is given.
    """
    if not mesh.has_uvs:
        raise MissingUVError(f"mesh '{mesh.name}' has no UV coordinates; texturing needs vt records")
    H, W = _texture_shape(texture_size)

    key = f"texels_{mesh.content_hash()}_{H}x{W}"
    data = cache.get(key) if cache is not None else None
    if data is None:
        data = _build_texel_map(mesh, H, W)
        if cache is not None:
            cache.put(key, **data)

    face_ids, bary = data["face_ids"], data["bary"]
    overlap = int(data["overlap"])
    if overlap:
        logger.warning("UV charts of '%s' overlap on %d texels; the lowest face wins", mesh.name, overlap)

    points = np.zeros((H, W, 3))
    normals = np.zeros((H, W, 3))
    hit = face_ids >= 0
    tri = mesh.faces[face_ids[hit]]
    beta = bary[hit]
    points[hit] = np.einsum("nk,nkd->nd", beta, mesh.vertices[tri])
    n = np.einsum("nk,nkd->nd", beta, mesh.vertex_normals()[tri])
    normals[hit] = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return TexelMap(face_ids=face_ids, bary=bary, points=points, normals=normals, overlap_count=overlap)


def texel_map_cache(cache_dir=TEXEL_CACHE_DIR) -> ArrayCache:
    return ArrayCache(cache_dir)


# ── Backprojection ────────────────────────────────────────────────────────

@dataclass
class ViewSamples:
    texels: np.ndarray          # flat texel indices written by this view
    colors: np.ndarray          # (N,3)
    weights: np.ndarray         # (N,) cos(theta)
    depth_residual: np.ndarray  # (N,) |texel depth - rendered depth along the texel's ray|


def _bilinear(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    H, W = image.shape[:2]
    x = np.clip(xy[:, 0] - 0.5, 0.0, W - 1.0)
    y = np.clip(xy[:, 1] - 0.5, 0.0, H - 1.0)
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _ray_hit_depth(cam_vertices: np.ndarray, faces: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Depth where each ray meets its triangle, inf when it misses."""
    tri = cam_vertices[faces]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    n = np.cross(e1, e2)
    denom = np.einsum("ij,ij->i", n, rays)
    hit = np.abs(denom) > 1e-300
    depth = np.einsum("ij,ij->i", n, tri[:, 0]) / np.where(hit, denom, 1.0)
    # barycentric containment of the hit point
    d = depth[:, None] * rays - tri[:, 0]
    d00, d01, d11 = (np.einsum("ij,ij->i", a, b) for a, b in ((e1, e1), (e1, e2), (e2, e2)))
    d20, d21 = np.einsum("ij,ij->i", d, e1), np.einsum("ij,ij->i", d, e2)
    det = d00 * d11 - d01 * d01
    det = np.where(np.abs(det) > 1e-300, det, 1e-300)
    b1 = (d11 * d20 - d01 * d21) / det
    b2 = (d00 * d21 - d01 * d20) / det
    inside = hit & (b1 >= -_RAY_HIT_EPS) & (b2 >= -_RAY_HIT_EPS) & (b1 + b2 <= 1.0 + _RAY_HIT_EPS) & (depth > 0)
    return np.where(inside, depth, np.inf)


def view_samples(texel_map: TexelMap, mesh: TriMesh, view: ViewImage, candidates: np.ndarray,
                 depth_tolerance: float, facing_threshold: float = FACING_THRESHOLD) -> ViewSamples:
    """
    Colors a view can contribute to the candidate texels. A texel qualifies when
    it projects inside the image, faces the camera (cos > threshold) and passes
    the depth test: the nearest rendered surface along its own camera ray lies
    within `depth_tolerance` of the texel's depth. The rendered surface is the
    nearest hit among the faces winning the 3x3 pixels around the projection.
    """
    camera = view.camera
    flat = np.nonzero(candidates.reshape(-1))[0]
    points = texel_map.points.reshape(-1, 3)[flat]
    normals = texel_map.normals.reshape(-1, 3)[flat]

    to_cam = camera.position - points
    cos = np.einsum("ij,ij->i", normals, to_cam) / np.maximum(np.linalg.norm(to_cam, axis=1), 1e-300)
    xy, depth = camera.project(points)
    W, H = camera.resolution
    ok = (cos > facing_threshold) & (depth > camera.near) & (depth < camera.far)
    ok &= (xy[:, 0] >= 0) & (xy[:, 0] < W) & (xy[:, 1] >= 0) & (xy[:, 1] < H)

    residual = np.full(len(flat), np.inf)
    sel = np.nonzero(ok)[0]
    if len(sel):
        buffers = render(mesh, camera, 0.0)
        cam_vertices = camera.to_camera(mesh.vertices)
        rays = camera.pixel_rays(xy[sel])
        px = np.floor(xy[sel, 0]).astype(np.int64)
        py = np.floor(xy[sel, 1]).astype(np.int64)
        rendered = np.full(len(sel), np.inf)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                winner = buffers.face_ids[np.clip(py + dy, 0, H - 1), np.clip(px + dx, 0, W - 1)]
                has = winner >= 0
                if has.any():
                    hit = _ray_hit_depth(cam_vertices, mesh.faces[winner[has]], rays[has])
                    rendered[has] = np.minimum(rendered[has], hit)
        residual[sel] = np.abs(depth[sel] - rendered)

    visible = ok & (residual < depth_tolerance)
    keep = np.nonzero(visible)[0]
    return ViewSamples(
        texels=flat[keep],
        colors=_bilinear(view.rgb, xy[keep]),
        weights=cos[keep],
        depth_residual=residual[keep],
    )


def default_depth_tolerance(mesh: TriMesh) -> float:
    return DEPTH_TOLERANCE_FACTOR * mesh.bounding_radius()


def backproject_views(atlas: TextureAtlas, texel_map: TexelMap, mesh: TriMesh, views: Sequence[ViewImage],
                      indices: Optional[Sequence[int]] = None, depth_tolerance: Optional[float] = None,
                      facing_threshold: float = FACING_THRESHOLD,
                      audit: Optional[List[ViewSamples]] = None) -> TextureAtlas:
    """
    Apply several views at once: texels visible from more than one of them get
    the cos-weighted mean. Only texels unfilled on entry are written.
    """
    tau = default_depth_tolerance(mesh) if depth_tolerance is None else depth_tolerance
    indices = list(range(len(views))) if indices is None else list(indices)
    out = atlas.copy()
    candidates = texel_map.covered & ~atlas.fill_mask

    n = candidates.size
    acc = np.zeros((n, 3))
    wsum = np.zeros(n)
    best_w = np.zeros(n)
    src = out.source.reshape(-1)
    for index, view in zip(indices, views):
        s = view_samples(texel_map, mesh, view, candidates, tau, facing_threshold)
        if audit is not None:
            audit.append(s)
        acc[s.texels] += s.weights[:, None] * s.colors
        wsum[s.texels] += s.weights
        stronger = s.weights > best_w[s.texels]
        src[s.texels[stronger]] = index
        best_w[s.texels[stronger]] = s.weights[stronger]

    written = wsum > 0
    color = out.color.reshape(-1, 3)
    color[written] = acc[written] / wsum[written, None]
    out.weight.reshape(-1)[written] = wsum[written]
    out.fill_mask.reshape(-1)[written] = True
    return out


def backproject_view(atlas: TextureAtlas, texel_map: TexelMap, mesh: TriMesh, view: ViewImage,
                     view_index: int = 0, depth_tolerance: Optional[float] = None,
                     facing_threshold: float = FACING_THRESHOLD,
                     audit: Optional[List[ViewSamples]] = None) -> TextureAtlas:
    return backproject_views(atlas, texel_map, mesh, [view], [view_index], depth_tolerance,
                             facing_threshold, audit)


# ── View selection ────────────────────────────────────────────────────────

def unfilled_visible_count(atlas: TextureAtlas, texel_map: TexelMap, mesh: TriMesh, view: ViewImage,
                           depth_tolerance: float, facing_threshold: float = FACING_THRESHOLD) -> int:
    candidates = texel_map.covered & ~atlas.fill_mask
    return len(view_samples(texel_map, mesh, view, candidates, depth_tolerance, facing_threshold).texels)


def _apply_in_order(atlas: TextureAtlas, texel_map: TexelMap, mesh: TriMesh, views: Sequence[ViewImage],
                    depth_tolerance: Optional[float], facing_threshold: float,
                    audit: Optional[List[ViewSamples]] = None) -> Tuple[List[int], TextureAtlas]:
    tau = default_depth_tolerance(mesh) if depth_tolerance is None else depth_tolerance
    order: List[int] = []

    paired = [i for tag in ("front", "back") for i, v in enumerate(views) if v.tag == tag][:2]
    if paired:
        atlas = backproject_views(atlas, texel_map, mesh, [views[i] for i in paired], paired, tau,
                                  facing_threshold, audit)
        order.extend(paired)

    remaining = [i for i in range(len(views)) if i not in paired]
    while remaining:
        counts = [unfilled_visible_count(atlas, texel_map, mesh, views[i], tau, facing_threshold) for i in remaining]
        best = int(np.argmax(counts))       # first maximum: lowest index
        if counts[best] == 0:
            break
        index = remaining.pop(best)
        atlas = backproject_view(atlas, texel_map, mesh, views[index], index, tau, facing_threshold, audit)
        order.append(index)
        logger.debug("View '%s' filled %d texels", views[index].tag, counts[best])
    return order, atlas


def select_views(atlas: TextureAtlas, texel_map: TexelMap, mesh: TriMesh, views: Sequence[ViewImage],
                 depth_tolerance: Optional[float] = None,
                 facing_threshold: float = FACING_THRESHOLD) -> List[int]:
    """
    Order in which views are applied: "front" and "back" together first, then
    greedily the view with the most visible unfilled texels, recounted after
    every application. Views that would add nothing are left out.
    """
    order, _ = _apply_in_order(atlas, texel_map, mesh, views, depth_tolerance, facing_threshold)
    return order


# ── Finalize ──────────────────────────────────────────────────────────────

def finalize_texture(atlas: TextureAtlas, dilation: int = TEXTURE_DILATION, gray: float = NEUTRAL_GRAY,
                     chart_mask: Optional[np.ndarray] = None) -> Tuple[TextureAtlas, CoverageReport]:
    """
    Bleed filled colors `dilation` texels outward (each pass copies the first
    filled 4-neighbour in up/down/left/right order), then paint what is still
    empty neutral gray.
    """
    out = atlas.copy()
    projected = int(atlas.fill_mask.sum())
    dilated = 0
    H, W = out.size
    for _ in range(dilation):
        filled = out.fill_mask
        if filled.all() or not filled.any():
            break
        new_color = out.color.copy()
        new_weight = out.weight.copy()
        new_source = out.source.copy()
        taken = np.zeros_like(filled)
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            # neighbour of (i,j) is (i+di, j+dj)
            shifted = np.zeros_like(filled)
            src_i = slice(max(di, 0), H + min(di, 0))
            dst_i = slice(max(-di, 0), H + min(-di, 0))
            src_j = slice(max(dj, 0), W + min(dj, 0))
            dst_j = slice(max(-dj, 0), W + min(-dj, 0))
            shifted[dst_i, dst_j] = filled[src_i, src_j]
            grab = shifted & ~filled & ~taken
            if grab.any():
                ii, jj = np.nonzero(grab)
                new_color[ii, jj] = out.color[ii + di, jj + dj]
                new_weight[ii, jj] = out.weight[ii + di, jj + dj]
                new_source[ii, jj] = out.source[ii + di, jj + dj]
                taken |= grab
        dilated += int(taken.sum())
        out = TextureAtlas(new_color, filled | taken, new_weight, new_source)

    empty = ~out.fill_mask
    out.color[empty] = gray
    out.weight[empty] = 0.0
    chart_texels = int(chart_mask.sum()) if chart_mask is not None else H * W
    report = CoverageReport(
        texel_count=H * W,
        chart_texels=chart_texels,
        projected=projected,
        dilated=dilated,
        unfilled=int(empty.sum()),
    )
    return out, report


# ── Views and orchestration ───────────────────────────────────────────────

def default_view_rig(mesh: TriMesh, resolution: Tuple[int, int] = LOSS_RESOLUTION,
                     fov: float = CAMERA_FOV_DEG) -> List[Tuple[str, Camera]]:
    """Six cameras: front, back and four diagonals alternating above and below."""
    center = mesh.centroid()
    distance = CAMERA_DISTANCE_FACTOR * mesh.bounding_radius(center)
    poses = [("front", 0.0, 0.0), ("back", 180.0, 0.0), ("aux-0", 45.0, 35.0),
             ("aux-1", 135.0, -35.0), ("aux-2", 225.0, 35.0), ("aux-3", 315.0, -35.0)]
    return [(tag, orbit_camera(center, distance, az, el, resolution, fov)) for tag, az, el in poses]


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def load_views(camera_file, images_dir=None) -> List[ViewImage]:
    """Views listed in a camera JSON file; image paths are relative to `images_dir`."""
    camera_file = Path(camera_file)
    images_dir = Path(images_dir) if images_dir is not None else camera_file.parent
    return [ViewImage(load_image(images_dir / v["image"]), v["camera"], v["tag"])
            for v in load_camera_file(camera_file)]


@dataclass
class TextureResult:
    atlas: TextureAtlas
    report: CoverageReport
    order: List[int]
    texel_map: TexelMap


def texture_from_views(mesh: TriMesh, views: Sequence[ViewImage], texture_size=TEXTURE_SIZE,
                       dilation: int = TEXTURE_DILATION, depth_tolerance: Optional[float] = None,
                       facing_threshold: float = FACING_THRESHOLD, cache: Optional[ArrayCache] = None,
                       audit: Optional[List[ViewSamples]] = None) -> TextureResult:
    if not views:
        raise RenderError("texturing needs at least one view image")
    texel_map = rasterize_uv_points(mesh, texture_size, cache)
    atlas = TextureAtlas.empty(texel_map.size)
    order, atlas = _apply_in_order(atlas, texel_map, mesh, views, depth_tolerance, facing_threshold, audit)
    final, report = finalize_texture(atlas, dilation, chart_mask=texel_map.covered)
    report.overlap_texels = texel_map.overlap_count
    report.view_order = [views[i].tag for i in order]
    logger.info("Texture: %d/%d chart texels projected from %d views, %d dilated, %d gray",
                report.projected, report.chart_texels, len(order), report.dilated, report.unfilled)
    return TextureResult(atlas=final, report=report, order=order, texel_map=texel_map)


def save_texture(result: TextureResult, mesh: TriMesh, directory, stem: str = "garment") -> Dict[str, str]:
    """Write <stem>.png, <stem>.mtl, a textured <stem>.obj and <stem>_coverage.json."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "texture": directory / f"{stem}.png",
        "mtl": directory / f"{stem}.mtl",
        "obj": directory / f"{stem}.obj",
        "coverage": directory / f"{stem}_coverage.json",
    }
    Image.fromarray(to_uint8(result.atlas.color)).save(paths["texture"])
    save_mtl(paths["mtl"], paths["texture"].name)
    save_obj(mesh, paths["obj"], mtl_name=paths["mtl"].name)
    paths["coverage"].write_text(json.dumps(result.report.to_dict(), indent=2), encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
