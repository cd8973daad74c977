"""
Loss terms for garment deformation.
Chamfer, Laplacian, triangle-quality, 2D render and embedding-similarity
terms, each returning a value and its gradient w.r.t. vertex positions, and
the weighted total pulled back onto the Jacobian field.
"""

import logging
import threading
import weakref
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from config import (
    CAMERAS_PER_ITER,
    CHAMFER_TARGET,
    LOSS_RESOLUTION,
    MAX_WORKERS,
    RENDER_SOFTNESS,
    SURFACE_SAMPLES,
    TRIAG_AREA_EPS_FACTOR,
    TRIAG_EDGE_WEIGHT,
    W_2D,
    W_CD,
    W_E,
    W_LAP,
    W_TRIAG,
)
from core.camera import Camera, sample_cameras
from core.embeddings import EmbeddingProvider
from core.errors import (
    ConfigValidationError,
    EmptyPointSetError,
    IsolatedVertexError,
    NonFiniteLossError,
    ProviderError,
)
from core.jacobians import GradientOperator, PoissonSystem, adjoint_gradient, solve_positions
from core.mesh import TriMesh, unique_edges
from core.proximity import ClosestPoints, MeshProximity
from core.rasterizer import (
    BufferGradients,
    Rasterization,
    RenderBuffers,
    render,
    shade_normals,
    shade_normals_backward,
)

logger = logging.getLogger(__name__)

CHAMFER_TARGETS = ("surface", "samples")


# ── Weights and breakdown ─────────────────────────────────────────────────

@dataclass
class LossWeights:
    w_cd: float = W_CD
    w_lap: float = W_LAP
    w_triag: float = W_TRIAG
    w_2d: float = W_2D
    w_e: float = W_E

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not np.isfinite(value) or value < 0.0:
                raise ConfigValidationError(f"loss weight {f.name} must be finite and >= 0, got {value}")
            setattr(self, f.name, value)

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigValidationError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    """Unweighted term values plus the weighted total."""
    cd: float = 0.0
    lap: float = 0.0
    triag: float = 0.0
    render2d: float = 0.0
    embed: float = 0.0
    total: float = 0.0

    CSV_HEADER = ("iteration", "cd", "lap", "triag", "render2d", "embed", "total")

    def weighted_total(self, weights: LossWeights) -> float:
        return (weights.w_cd * self.cd + weights.w_lap * self.lap + weights.w_triag * self.triag
                + weights.w_2d * self.render2d + weights.w_e * self.embed)

    def to_row(self, iteration: int) -> List[str]:
        return [str(iteration)] + [repr(float(getattr(self, k))) for k in self.CSV_HEADER[1:]]

    def to_dict(self) -> Dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.CSV_HEADER[1:]}


# ── Surface sampling ──────────────────────────────────────────────────────

@dataclass
class SurfaceSamples:
    """Points with face provenance; positions follow the mesh they are evaluated on."""
    face_ids: np.ndarray      # (N,)
    bary: np.ndarray          # (N,3)
    points: np.ndarray        # (N,3) at sampling time

    def __len__(self) -> int:
        return len(self.face_ids)

    def positions(self, mesh: TriMesh) -> np.ndarray:
        corners = mesh.vertices[mesh.faces[self.face_ids]]      # (N,3,3)
        return np.einsum("nk,nkd->nd", self.bary, corners)

    def scatter(self, mesh: TriMesh, grad_points: np.ndarray) -> np.ndarray:
        """Chain point gradients (N,3) to vertex gradients (V,3)."""
        out = np.zeros((mesh.vertex_count, 3))
        tri = mesh.faces[self.face_ids]
        for k in range(3):
            np.add.at(out, tri[:, k], self.bary[:, k:k + 1] * grad_points)
        return out


def sample_surface(mesh: TriMesh, count: int, seed: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> SurfaceSamples:
    """Area-weighted uniform samples (inverse-CDF face choice, sqrt barycentric warp)."""
    if count < 1:
        raise ValueError("sample count must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    u = rng.random(count)
    face_ids = np.minimum(np.searchsorted(cdf, u, side="right"), mesh.face_count - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    samples = SurfaceSamples(face_ids=face_ids, bary=bary, points=np.empty((count, 3)))
    samples.points = samples.positions(mesh)
    return samples


# ── Chamfer ───────────────────────────────────────────────────────────────

def chamfer_one_directional(src_points: np.ndarray, tgt_points: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared distance from each source point to its nearest target point."""
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(tgt_points, dtype=np.float64).reshape(-1, 3)
    if not len(src) or not len(tgt):
        raise EmptyPointSetError(f"Chamfer needs non-empty point sets (got {len(src)} and {len(tgt)})")
    _, idx = cKDTree(tgt).query(src)
    diff = src - tgt[idx]
    sq = np.einsum("ij,ij->i", diff, diff)
    return float(sq.mean()), 2.0 * diff / len(src)


def surface_chamfer(points: np.ndarray, mesh: TriMesh,
                    proximity: Optional[MeshProximity] = None) -> Tuple[float, np.ndarray, ClosestPoints]:
    """Mean squared distance from points to the exact closest point on the mesh surface."""
    proximity = proximity if proximity is not None else MeshProximity(mesh)
    closest = proximity.query(points)
    diff = np.asarray(points, dtype=np.float64) - closest.points
    return float(closest.sq_distances.mean()), 2.0 * diff / len(diff), closest


# ── Regularizers ──────────────────────────────────────────────────────────

class UniformLaplacian:
    """L = I - D^-1 A over the mesh edge graph."""

    def __init__(self, faces: np.ndarray, vertex_count: int):
        edges, _, _ = unique_edges(faces)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adjacency = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(vertex_count, vertex_count))
        degree = np.asarray(adjacency.sum(axis=1)).ravel()
        isolated = np.nonzero(degree == 0)[0]
        if len(isolated):
            raise IsolatedVertexError(isolated)
        self.matrix = (sp.identity(vertex_count, format="csr") - sp.diags(1.0 / degree) @ adjacency).tocsr()
        self.vertex_count = vertex_count

    def __call__(self, vertices: np.ndarray) -> Tuple[float, np.ndarray]:
        delta = self.matrix @ vertices
        V = self.vertex_count
        value = float(np.sum(delta * delta) / V)
        grad = (2.0 / V) * (self.matrix.T @ delta)
        return value, grad


def laplacian_loss(mesh: TriMesh) -> Tuple[float, np.ndarray]:
    """(1/V) sum ||v - mean(one-ring)||^2 with uniform weights."""
    return UniformLaplacian(mesh.faces, mesh.vertex_count)(mesh.vertices)


def triangle_quality_loss(mesh: TriMesh, edge_weight: float = TRIAG_EDGE_WEIGHT,
                          eps_factor: float = TRIAG_AREA_EPS_FACTOR) -> Tuple[float, np.ndarray]:
    """
    Small-area penalty (1/F) sum eps/(A^2+eps) plus edge-length uniformity
    (w/E) sum (l - lbar)^2 / lbar^2, with eps = (eps_factor * lbar)^4.
    The gradient includes the dependence of lbar and eps on the vertices.
    """
    v = mesh.vertices
    faces = mesh.faces
    F = mesh.face_count
    edges, _, _ = unique_edges(faces)
    E = len(edges)

    ev = v[edges[:, 0]] - v[edges[:, 1]]
    length = np.linalg.norm(ev, axis=1)
    lbar = float(length.mean())
    eps = (eps_factor * lbar) ** 4

    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    e1, e2 = b - a, c - a
    N = np.cross(e1, e2)
    nlen = np.linalg.norm(N, axis=1)
    A = 0.5 * nlen
    denom = A * A + eps
    area_term = eps / denom
    rel = (length - lbar) / lbar
    value = float(area_term.mean() + edge_weight * np.mean(rel * rel))

    grad = np.zeros_like(v)

    # area part through A
    dA = -2.0 * A * eps / denom ** 2 / F
    n = N / np.maximum(nlen, 1e-300)[:, None]
    gN = (0.5 * dA)[:, None] * n
    g_e1 = np.cross(e2, gN)
    g_e2 = np.cross(gN, e1)
    np.add.at(grad, faces[:, 1], g_e1)
    np.add.at(grad, faces[:, 2], g_e2)
    np.add.at(grad, faces[:, 0], -(g_e1 + g_e2))

    # dependence on lbar: area part through eps, edge part explicitly
    d_eps = float(np.sum(A * A / denom ** 2) / F)
    d_lbar = d_eps * 4.0 * eps / lbar
    d_lbar += edge_weight / E * float(np.sum(-2.0 * (length - lbar) / lbar ** 2 - 2.0 * (length - lbar) ** 2 / lbar ** 3))

    d_len = edge_weight / E * 2.0 * (length - lbar) / lbar ** 2 + d_lbar / E
    g_edge = (d_len / np.maximum(length, 1e-300))[:, None] * ev
    np.add.at(grad, edges[:, 0], g_edge)
    np.add.at(grad, edges[:, 1], -g_edge)
    return value, grad


# ── Render terms ──────────────────────────────────────────────────────────

def _camera_key(camera: Camera) -> tuple:
    return (camera.position.tobytes(), camera.look_at.tobytes(), camera.up.tobytes(),
            camera.fov, camera.resolution, camera.near, camera.far)


class GuideRenderCache:
    """Bounded LRU of guide-mesh render buffers keyed by (mesh hash, camera, softness)."""

    def __init__(self, max_entries: int = 256):
        self._entries: "OrderedDict[tuple, RenderBuffers]" = OrderedDict()
        self._max = max_entries
        self._lock = threading.Lock()
        # entries vanish with their mesh
        self._hashes: "weakref.WeakKeyDictionary[TriMesh, str]" = weakref.WeakKeyDictionary()

    def _mesh_key(self, mesh: TriMesh) -> str:
        with self._lock:
            digest = self._hashes.get(mesh)
        if digest is None:
            digest = mesh.content_hash()
            with self._lock:
                self._hashes[mesh] = digest
        return digest

    def get(self, mesh: TriMesh, camera: Camera, softness: float) -> RenderBuffers:
        key = (self._mesh_key(mesh), _camera_key(camera), float(softness))
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                return self._entries[key]
        buffers = render(mesh, camera, softness)
        with self._lock:
            self._entries[key] = buffers
            while len(self._entries) > self._max:
                self._entries.popitem(last=False)
        return buffers

    def __len__(self) -> int:
        return len(self._entries)


def _l1_view(def_buffers: RenderBuffers, guide_buffers: RenderBuffers) -> Tuple[float, BufferGradients]:
    """Mean abs difference over silhouette + normal channels and its buffer gradients."""
    d_sil = def_buffers.silhouette - guide_buffers.silhouette
    d_nrm = def_buffers.normals - guide_buffers.normals
    n = 4.0 * d_sil.size
    value = (np.abs(d_sil).sum() + np.abs(d_nrm).sum()) / n
    return float(value), BufferGradients(silhouette=np.sign(d_sil) / n, normals=np.sign(d_nrm) / n)


def parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def render_l1(def_mesh: TriMesh, guide_mesh: TriMesh, cameras: Sequence[Camera],
              softness: float = RENDER_SOFTNESS, cache: Optional[GuideRenderCache] = None,
              workers: int = MAX_WORKERS) -> Tuple[float, np.ndarray]:
    """(1/K) sum over views of the L1 render difference; gradient w.r.t. def vertices."""
    if not cameras:
        raise ValueError("render_l1 needs at least one camera")
    cache = cache if cache is not None else GuideRenderCache()
    K = len(cameras)

    def one(camera):
        ras = Rasterization(def_mesh, camera, softness)
        value, grads = _l1_view(ras.buffers(), cache.get(guide_mesh, camera, softness))
        return value, ras.backward(grads)

    results = parallel_map(one, list(cameras), workers)
    value = sum(r[0] for r in results) / K
    grad = sum(r[1] for r in results) / K
    return float(value), grad


def embedding_loss(def_renders: Sequence[np.ndarray], guide_renders: Sequence[np.ndarray],
                   provider: EmbeddingProvider, return_grad: bool = False):
    """
    (1/K) sum (1 - cos(E(def_i), E(guide_i))). With return_grad, also returns
    per-image gradients for differentiable providers (None otherwise).
    """
    if len(def_renders) != len(guide_renders):
        raise ValueError(f"image lists differ in length ({len(def_renders)} vs {len(guide_renders)})")
    if not def_renders:
        raise ValueError("embedding_loss needs at least one image pair")
    K = len(def_renders)
    total = 0.0
    grads: Optional[List[np.ndarray]] = [] if provider.differentiable else None
    for i, (d_img, g_img) in enumerate(zip(def_renders, guide_renders)):
        try:
            e_def = provider.embed(d_img).values
            e_guide = provider.embed(g_img).values
            total += 1.0 - float(np.dot(e_def, e_guide))
            if return_grad and grads is not None:
                grads.append(provider.vjp(d_img, -e_guide / K))
        except ProviderError as e:
            raise e.for_view(i) from e
    value = total / K
    if return_grad:
        return value, grads
    return value


# ── Total loss ────────────────────────────────────────────────────────────

@dataclass
class IterationBatch:
    """Stochastic inputs of one iteration; no guide points means the exact guide surface."""
    cameras: List[Camera]
    def_samples: SurfaceSamples
    guide_points: Optional[np.ndarray] = None


@dataclass(eq=False)
class LossContext:
    """Everything fixed across iterations of one deformation run."""
    rest: TriMesh
    op: GradientOperator
    system: PoissonSystem
    guide: TriMesh
    weights: LossWeights = field(default_factory=LossWeights)
    provider: Optional[EmbeddingProvider] = None
    softness: float = RENDER_SOFTNESS
    resolution: Tuple[int, int] = LOSS_RESOLUTION
    cameras_per_iter: int = CAMERAS_PER_ITER
    surface_samples: int = SURFACE_SAMPLES
    workers: int = MAX_WORKERS
    guide_cache: GuideRenderCache = field(default_factory=GuideRenderCache)
    laplacian: Optional[UniformLaplacian] = None
    chamfer_target: str = CHAMFER_TARGET
    guide_proximity: Optional[MeshProximity] = None

    def __post_init__(self):
        if self.chamfer_target not in CHAMFER_TARGETS:
            raise ConfigValidationError(
                f"Unknown chamfer target: {self.chamfer_target}. Available: {list(CHAMFER_TARGETS)}"
            )
        if self.laplacian is None:
            self.laplacian = UniformLaplacian(self.rest.faces, self.rest.vertex_count)
        if self.chamfer_target == "surface" and self.guide_proximity is None:
            self.guide_proximity = MeshProximity(self.guide)

    def positions(self, jacobians: np.ndarray, translation: np.ndarray) -> np.ndarray:
        return solve_positions(self.system, self.op, jacobians) + np.asarray(translation)[None, :]

    def deformed(self, jacobians: np.ndarray, translation: np.ndarray) -> TriMesh:
        return self.rest.with_vertices(self.positions(jacobians, translation))

    def draw_batch(self, def_mesh: TriMesh, rng: np.random.Generator) -> IterationBatch:
        """Cameras, then deformed-mesh samples, then guide samples (sampled target only), from one stream."""
        cameras = sample_cameras(0, self.cameras_per_iter, self.guide, resolution=self.resolution, rng=rng)
        def_samples = sample_surface(def_mesh, self.surface_samples, rng=rng)
        guide_points = None
        if self.chamfer_target == "samples":
            guide_points = sample_surface(self.guide, self.surface_samples, rng=rng).points
        return IterationBatch(cameras=cameras, def_samples=def_samples, guide_points=guide_points)


@dataclass
class TotalLoss:
    breakdown: LossBreakdown
    d_jacobians: np.ndarray
    d_translation: np.ndarray
    vertices: np.ndarray
    d_vertices: np.ndarray


def _finite(term: str, value: float, grad: Optional[np.ndarray] = None) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(term, value)
    if grad is not None and not np.all(np.isfinite(grad)):
        raise NonFiniteLossError(term, float("nan"))


def _render_terms(ctx: LossContext, def_mesh: TriMesh, cameras: List[Camera]):
    """Render-based terms sharing one rasterization per view."""
    w = ctx.weights
    K = len(cameras)
    want_embed = w.w_e > 0.0 and ctx.provider is not None

    def forward(camera):
        ras = Rasterization(def_mesh, camera, ctx.softness)
        return ras, ras.buffers(), ctx.guide_cache.get(ctx.guide, camera, ctx.softness)

    views = parallel_map(forward, cameras, ctx.workers)

    render2d = 0.0
    grads: List[BufferGradients] = [BufferGradients() for _ in views]
    if w.w_2d > 0.0:
        for i, (_, def_buf, guide_buf) in enumerate(views):
            value, g = _l1_view(def_buf, guide_buf)
            render2d += value / K
            scale = w.w_2d / K
            grads[i] = BufferGradients(silhouette=g.silhouette * scale, normals=g.normals * scale)

    embed = 0.0
    if want_embed:
        def_images = [shade_normals(b) for _, b, _ in views]
        guide_images = [shade_normals(g) for _, _, g in views]
        embed, image_grads = embedding_loss(def_images, guide_images, ctx.provider, return_grad=True)
        if image_grads is not None:
            for i, (_, def_buf, _) in enumerate(views):
                eg = shade_normals_backward(def_buf, w.w_e * image_grads[i])
                grads[i] = BufferGradients(
                    silhouette=eg.silhouette if grads[i].silhouette is None else grads[i].silhouette + eg.silhouette,
                    normals=eg.normals if grads[i].normals is None else grads[i].normals + eg.normals,
                )

    def backward(item):
        (ras, _, _), g = item
        if g.silhouette is None and g.normals is None:
            return np.zeros((def_mesh.vertex_count, 3))
        return ras.backward(g)

    d_vertices = sum(parallel_map(backward, list(zip(views, grads)), ctx.workers))
    return render2d, embed, d_vertices


def total_loss(ctx: LossContext, jacobians: np.ndarray, translation: np.ndarray,
               batch: IterationBatch, vertices: Optional[np.ndarray] = None) -> TotalLoss:
    """Weighted sum of all terms; zero-weight terms are skipped entirely."""
    w = ctx.weights
    if vertices is None:
        vertices = ctx.positions(jacobians, translation)
    def_mesh = ctx.rest.with_vertices(vertices)
    d_vertices = np.zeros_like(vertices)
    br = LossBreakdown()

    if w.w_cd > 0.0:
        src = batch.def_samples.positions(def_mesh)
        if batch.guide_points is None:
            br.cd, g_pts, _ = surface_chamfer(src, ctx.guide, ctx.guide_proximity)
        else:
            br.cd, g_pts = chamfer_one_directional(src, batch.guide_points)
        g = batch.def_samples.scatter(def_mesh, g_pts)
        _finite("cd", br.cd, g)
        d_vertices += w.w_cd * g

    if w.w_lap > 0.0:
        br.lap, g = ctx.laplacian(vertices)
        _finite("lap", br.lap, g)
        d_vertices += w.w_lap * g

    if w.w_triag > 0.0:
        br.triag, g = triangle_quality_loss(def_mesh)
        _finite("triag", br.triag, g)
        d_vertices += w.w_triag * g

    if (w.w_2d > 0.0 or (w.w_e > 0.0 and ctx.provider is not None)) and batch.cameras:
        br.render2d, br.embed, g = _render_terms(ctx, def_mesh, batch.cameras)
        _finite("render2d", br.render2d)
        _finite("embed", br.embed, g)
        d_vertices += g

    br.total = br.weighted_total(w)
    _finite("total", br.total)

    d_jacobians = adjoint_gradient(ctx.system, ctx.op, d_vertices)
    return TotalLoss(
        breakdown=br,
        d_jacobians=d_jacobians,
        d_translation=d_vertices.sum(axis=0),
        vertices=vertices,
        d_vertices=d_vertices,
    )
