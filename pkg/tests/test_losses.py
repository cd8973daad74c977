"""
Pytest tests for the loss terms and the weighted total.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.camera import orbit_camera
from core.embeddings import EmbeddingVector, StubEmbeddingProvider
from core.errors import EmptyPointSetError, IsolatedVertexError, NonFiniteLossError, ProviderError
from core.jacobians import build_system, identity_jacobians
from core.losses import (
    GuideRenderCache,
    IterationBatch,
    LossContext,
    LossWeights,
    UniformLaplacian,
    chamfer_one_directional,
    embedding_loss,
    laplacian_loss,
    render_l1,
    sample_surface,
    surface_chamfer,
    total_loss,
    triangle_quality_loss,
)
from core.mesh import TriMesh
from core.primitives import grid, icosphere
from core.rasterizer import render


def brute_force_chamfer(src, tgt):
    d = ((src[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1).mean()


def noisy_grid(nx, ny, seed, scale=0.02):
    mesh = grid(nx, ny)
    rng = np.random.default_rng(seed)
    return mesh.with_vertices(mesh.vertices + scale * rng.normal(size=mesh.vertices.shape))


def front_camera(resolution=(48, 48)):
    return orbit_camera(np.zeros(3), 2.0, 0.0, 0.0, resolution)


class FailingProvider(StubEmbeddingProvider):
    """Stub that fails on the n-th embed call."""

    def __init__(self, fail_on: int):
        super().__init__(grid=8)
        self.calls = 0
        self.fail_on = fail_on

    def embed(self, image):
        self.calls += 1
        if self.calls == self.fail_on:
            raise ProviderError("service unavailable")
        return super().embed(image)


# ── Chamfer ───────────────────────────────────────────────────────────────

class TestChamfer:
    """One-directional squared Chamfer distance."""

    def test_identical_sets(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        value, grad = chamfer_one_directional(pts, pts)
        assert value == 0.0
        assert not grad.any()

    def test_hand_computed(self):
        value, grad = chamfer_one_directional([[0, 0, 0]], [[1, 0, 0], [0, 2, 0]])
        assert value == pytest.approx(1.0)
        np.testing.assert_allclose(grad, [[-2.0, 0.0, 0.0]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            src = rng.normal(size=(50, 3))
            tgt = rng.normal(size=(30, 3))
            value, _ = chamfer_one_directional(src, tgt)
            assert abs(value - brute_force_chamfer(src, tgt)) < 1e-10

    def test_large_instance_and_gradient(self):
        rng = np.random.default_rng(2)
        src = rng.uniform(size=(500, 3))
        tgt = rng.uniform(size=(300, 3))
        value, grad = chamfer_one_directional(src, tgt)
        assert abs(value - brute_force_chamfer(src, tgt)) < 1e-10

        h = 1e-6
        for i, k in [(0, 0), (17, 1), (250, 2), (499, 0)]:
            up, down = src.copy(), src.copy()
            up[i, k] += h
            down[i, k] -= h
            fd = (chamfer_one_directional(up, tgt)[0] - chamfer_one_directional(down, tgt)[0]) / (2 * h)
            assert grad[i, k] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_only_source_receives_gradient(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(20, 3))
        tgt = rng.normal(size=(40, 3))
        _, grad = chamfer_one_directional(src, tgt)
        assert grad.shape == src.shape

    def test_empty_sets(self):
        with pytest.raises(EmptyPointSetError):
            chamfer_one_directional(np.zeros((0, 3)), np.zeros((3, 3)))
        with pytest.raises(EmptyPointSetError):
            chamfer_one_directional(np.zeros((3, 3)), np.zeros((0, 3)))

    def test_surface_chamfer_on_the_surface(self):
        mesh = icosphere(2)
        samples = sample_surface(mesh, 200, seed=0)
        value, grad, closest = surface_chamfer(samples.points, mesh)
        assert value < 1e-20
        assert closest.points.shape == (200, 3)

    def test_surface_chamfer_off_plane(self):
        mesh = grid(2, 2, size=(1.0, 1.0))
        points = np.array([[0.1, 0.2, 0.5], [-0.3, 0.0, -0.25]])
        value, grad, _ = surface_chamfer(points, mesh)
        assert value == pytest.approx((0.25 + 0.0625) / 2)
        np.testing.assert_allclose(grad, [[0, 0, 0.5], [0, 0, -0.25]], atol=1e-12)


# ── Surface Sampling ──────────────────────────────────────────────────────

class TestSampleSurface:
    """Area-weighted, reproducible samples with barycentric provenance."""

    def test_points_inside_triangle(self):
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        samples = sample_surface(mesh, 1000, seed=5)
        assert np.all(samples.bary >= 0.0)
        np.testing.assert_allclose(samples.bary.sum(axis=1), 1.0)
        np.testing.assert_allclose(samples.points, samples.positions(mesh))

    def test_area_proportional(self):
        # areas 1 and 3
        mesh = TriMesh([[0, 0, 0], [2, 0, 0], [0, 1, 0], [0, -3, 0]], [[0, 1, 2], [0, 3, 1]])
        np.testing.assert_allclose(mesh.face_areas(), [1.0, 3.0])
        samples = sample_surface(mesh, 100_000, seed=6)
        assert np.mean(samples.face_ids == 1) == pytest.approx(0.75, abs=0.01)

    def test_same_seed_same_samples(self):
        mesh = icosphere(1)
        a = sample_surface(mesh, 100, seed=9)
        b = sample_surface(mesh, 100, seed=9)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.face_ids, b.face_ids)

    def test_scatter_is_adjoint_of_positions(self):
        mesh = icosphere(1)
        samples = sample_surface(mesh, 64, seed=2)
        rng = np.random.default_rng(0)
        g_pts = rng.normal(size=(64, 3))
        dv = rng.normal(size=mesh.vertices.shape)
        lhs = np.sum(samples.scatter(mesh, g_pts) * dv)
        rhs = np.sum(g_pts * samples.positions(mesh.with_vertices(dv)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


# ── Regularizers ──────────────────────────────────────────────────────────

class TestLaplacian:
    """Uniform Laplacian smoothness."""

    def test_flat_grid_interior_is_zero(self):
        mesh = grid(6, 6)
        lap = UniformLaplacian(mesh.faces, mesh.vertex_count)
        delta = lap.matrix @ mesh.vertices
        idx = np.arange(mesh.vertex_count).reshape(7, 7)[1:-1, 1:-1].ravel()
        np.testing.assert_allclose(delta[idx], 0.0, atol=1e-14)

    def test_displaced_vertex(self):
        mesh = grid(6, 6)
        v = mesh.vertices.copy()
        centre = 3 * 7 + 3
        d = np.array([0.0, 0.0, 0.2])
        v[centre] += d
        lap = UniformLaplacian(mesh.faces, mesh.vertex_count)
        np.testing.assert_allclose((lap.matrix @ v)[centre], d, atol=1e-14)

    def test_gradient_finite_differences(self):
        mesh = noisy_grid(9, 19, seed=4, scale=0.05)
        assert mesh.vertex_count == 200
        value, grad = laplacian_loss(mesh)
        assert value > 0
        h = 1e-6
        rng = np.random.default_rng(0)
        for i in rng.choice(mesh.vertex_count, 10, replace=False):
            for k in range(3):
                up = mesh.vertices.copy()
                down = mesh.vertices.copy()
                up[i, k] += h
                down[i, k] -= h
                fd = (laplacian_loss(mesh.with_vertices(up))[0] - laplacian_loss(mesh.with_vertices(down))[0]) / (2 * h)
                assert grad[i, k] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_isolated_vertex(self):
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
        with pytest.raises(IsolatedVertexError) as info:
            laplacian_loss(mesh)
        assert info.value.vertices == [3]


class TestTriangleQuality:
    """Small-area penalty plus edge-length uniformity."""

    def test_equilateral_pair(self):
        s = np.sqrt(3) / 2
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0.5, s, 0], [1.5, s, 0]], [[0, 1, 2], [1, 3, 2]])
        value, _ = triangle_quality_loss(mesh)
        eps = (1e-3 * 1.0) ** 4
        area = np.sqrt(3) / 4
        assert value == pytest.approx(eps / (area ** 2 + eps), rel=1e-6)

    def test_area_term_tends_to_one(self):
        values = []
        for k in range(9):
            mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0.5, 10.0 ** -k, 0]], [[0, 1, 2]])
            values.append(triangle_quality_loss(mesh, edge_weight=0.0)[0])
        assert all(b > a for a, b in zip(values, values[1:]))
        assert values[-1] > 0.99

    def test_gradient_finite_differences(self):
        mesh = noisy_grid(3, 3, seed=8, scale=0.05)
        _, grad = triangle_quality_loss(mesh)
        h = 1e-6
        fd = np.zeros_like(grad)
        for i in range(mesh.vertex_count):
            for k in range(3):
                up = mesh.vertices.copy()
                down = mesh.vertices.copy()
                up[i, k] += h
                down[i, k] -= h
                fd[i, k] = (triangle_quality_loss(mesh.with_vertices(up))[0]
                            - triangle_quality_loss(mesh.with_vertices(down))[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


# ── Render Terms ──────────────────────────────────────────────────────────

class TestRenderL1:
    """Silhouette + normal L1 between deformed and guide renders."""

    def test_identical_meshes(self):
        mesh = icosphere(2, radius=0.5)
        value, grad = render_l1(mesh, mesh, [front_camera()], workers=1)
        assert value == 0.0
        assert not grad.any()

    def test_hidden_deformed_mesh(self):
        guide = icosphere(2, radius=0.5)
        hidden = guide.with_vertices(guide.vertices + [0.0, 0.0, 10.0])
        cam = front_camera()
        value, _ = render_l1(hidden, guide, [cam], workers=1)
        buffers = render(guide, cam, 1.0)
        expected = (np.abs(buffers.silhouette).sum() + np.abs(buffers.normals).sum()) / (4 * buffers.silhouette.size)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_monotone_in_offset(self):
        guide = grid(2, 2, size=(0.8, 0.8))
        cam = front_camera()
        values = []
        for k in range(10):
            offset = 0.1 * (10 - k) / 10
            moved = guide.with_vertices(guide.vertices + [offset, 0.0, 0.0])
            values.append(render_l1(moved, guide, [cam], workers=1)[0])
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
        assert values[-1] < values[0]

    def test_guide_cache_reuses_renders(self):
        cache = GuideRenderCache()
        mesh = icosphere(1, radius=0.5)
        a = cache.get(mesh, front_camera(), 1.0)
        b = cache.get(mesh, front_camera(), 1.0)
        assert a is b
        assert len(cache) == 1

    def test_guide_cache_follows_short_lived_meshes(self):
        """Meshes created and dropped one after another never share cached renders."""
        cache = GuideRenderCache()
        camera = front_camera((24, 24))
        for radius in (0.3, 0.4, 0.5, 0.6):
            mesh = icosphere(1, radius=radius)
            cached = cache.get(mesh, camera, 1.0)
            np.testing.assert_array_equal(cached.silhouette, render(mesh, camera, 1.0).silhouette)
            del mesh
        assert len(cache) == 4


class TestEmbeddingLoss:
    """1 - cosine similarity of provider embeddings."""

    def test_identical_images(self):
        rng = np.random.default_rng(0)
        images = [rng.uniform(size=(32, 32, 3)) for _ in range(3)]
        assert embedding_loss(images, images, StubEmbeddingProvider()) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_embeddings(self):
        left = np.zeros((32, 32, 3))
        left[:, :16] = 1.0
        top = np.zeros((32, 32, 3))
        top[:16] = 1.0
        provider = StubEmbeddingProvider()
        assert float(np.dot(provider.embed(left).values, provider.embed(top).values)) == pytest.approx(0.0, abs=1e-12)
        assert embedding_loss([left], [top], provider) == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(1)
        defs = [rng.uniform(size=(64, 64, 3)) for _ in range(4)]
        guides = [rng.uniform(size=(64, 64, 3)) for _ in range(4)]

        def features(img):
            gray = img @ np.array([0.299, 0.587, 0.114])
            small = gray.reshape(32, 2, 32, 2).mean(axis=(1, 3)).ravel()
            small = small - small.mean()
            return small / np.linalg.norm(small)

        expected = np.mean([1.0 - features(d) @ features(g) for d, g in zip(defs, guides)])
        assert embedding_loss(defs, guides, StubEmbeddingProvider()) == pytest.approx(expected, abs=1e-10)

    def test_failure_carries_view_index(self):
        images = [np.random.default_rng(i).uniform(size=(16, 16, 3)) for i in range(3)]
        with pytest.raises(ProviderError) as info:
            embedding_loss(images, images, FailingProvider(fail_on=3))
        assert info.value.view_index == 1

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            embedding_loss([np.zeros((4, 4, 3))], [], StubEmbeddingProvider())


# ── Total Loss ────────────────────────────────────────────────────────────

@pytest.fixture(scope="module")
def small_setup():
    """30-face patch, a nearby guide and one fixed batch of sparse samples."""
    rest = noisy_grid(3, 5, seed=11)
    assert rest.face_count == 30
    guide = rest.with_vertices(rest.vertices * 1.1 + [0.02, 0.0, 0.05])
    op, system = build_system(rest)
    rng = np.random.default_rng(12)
    batch = IterationBatch(
        cameras=[front_camera((32, 32))],
        def_samples=sample_surface(rest, 60, rng=rng),
        guide_points=sample_surface(guide, 20, rng=rng).points,
    )
    return rest, guide, op, system, batch


def make_context(small_setup, weights, provider=None):
    rest, guide, op, system, _ = small_setup
    return LossContext(rest=rest, op=op, system=system, guide=guide, weights=weights,
                       provider=provider, resolution=(32, 32), workers=1)


class TestTotalLoss:
    """Weighted sum, ablation and the pull-back to Jacobians."""

    def test_all_weights_zero(self, small_setup):
        rest, _, _, _, batch = small_setup
        ctx = make_context(small_setup, LossWeights(0, 0, 0, 0, 0))
        result = total_loss(ctx, identity_jacobians(rest.face_count), np.zeros(3), batch)
        assert result.breakdown.total == 0.0
        assert not result.d_jacobians.any()
        assert not result.d_translation.any()

    def test_chamfer_only(self, small_setup):
        rest, _, _, _, batch = small_setup
        ctx = make_context(small_setup, LossWeights(1, 0, 0, 0, 0))
        br = total_loss(ctx, identity_jacobians(rest.face_count), np.zeros(3), batch).breakdown
        assert br.total == br.cd
        assert br.cd > 0
        assert br.lap == br.triag == br.render2d == br.embed == 0.0

    def test_linear_in_weights(self, small_setup):
        rest, _, _, _, batch = small_setup
        J = identity_jacobians(rest.face_count)
        w1 = LossWeights(1.0, 0.2, 0.1, 0.5, 0.3)
        w2 = LossWeights(0.5, 0.1, 0.3, 0.2, 0.1)
        w3 = LossWeights(1.5, 0.3, 0.4, 0.7, 0.4)
        provider = StubEmbeddingProvider(grid=8)
        r1, r2, r3 = (total_loss(make_context(small_setup, w, provider), J, np.zeros(3), batch) for w in (w1, w2, w3))
        assert r3.breakdown.total == pytest.approx(r1.breakdown.total + r2.breakdown.total, rel=1e-10)
        np.testing.assert_allclose(r3.d_jacobians, r1.d_jacobians + r2.d_jacobians, rtol=1e-8, atol=1e-12)

    def test_breakdown_total_is_weighted_sum(self, small_setup):
        rest, _, _, _, batch = small_setup
        weights = LossWeights()
        ctx = make_context(small_setup, weights, StubEmbeddingProvider(grid=8))
        br = total_loss(ctx, identity_jacobians(rest.face_count), np.zeros(3), batch).breakdown
        assert br.total == pytest.approx(br.weighted_total(weights), abs=1e-10)

    def test_end_to_end_finite_differences(self, small_setup):
        """Smooth terms: adjoint gradient through the Poisson solve."""
        rest, _, _, _, batch = small_setup
        ctx = make_context(small_setup, LossWeights(1.0, 0.5, 0.2, 0.0, 0.0))
        rng = np.random.default_rng(13)
        J = identity_jacobians(rest.face_count) + 0.05 * rng.normal(size=(rest.face_count, 3, 3))
        t = np.array([0.01, -0.02, 0.03])
        result = total_loss(ctx, J, t, batch)

        def value(field, shift):
            return total_loss(ctx, field, shift, batch).breakdown.total

        h = 1e-6
        for idx in [(0, 0, 0), (3, 1, 2), (12, 2, 1), (29, 0, 2), (17, 1, 1), (8, 2, 0)]:
            up, down = J.copy(), J.copy()
            up[idx] += h
            down[idx] -= h
            fd = (value(up, t) - value(down, t)) / (2 * h)
            assert result.d_jacobians[idx] == pytest.approx(fd, rel=1e-3, abs=1e-7)
        for k in range(3):
            dt = np.zeros(3)
            dt[k] = h
            fd = (value(J, t + dt) - value(J, t - dt)) / (2 * h)
            assert result.d_translation[k] == pytest.approx(fd, rel=1e-3, abs=1e-7)

    def test_non_finite_term_named(self, small_setup):
        rest, _, _, _, batch = small_setup
        ctx = make_context(small_setup, LossWeights(0, 1, 0, 0, 0))
        ctx.laplacian = lambda v: (float("inf"), np.zeros_like(v))
        with pytest.raises(NonFiniteLossError) as info:
            total_loss(ctx, identity_jacobians(rest.face_count), np.zeros(3), batch)
        assert info.value.term == "lap"

    def test_weights_validated(self):
        from core.errors import ConfigValidationError

        with pytest.raises(ConfigValidationError):
            LossWeights(w_cd=-1.0)
        with pytest.raises(ConfigValidationError):
            LossWeights.from_dict({"w_typo": 1.0})

    def test_surface_target_vanishes_at_rest(self):
        """Measured against the exact guide surface, an undeformed base matching the guide costs nothing."""
        rest = noisy_grid(3, 5, seed=11)
        op, system = build_system(rest)
        ctx = LossContext(rest=rest, op=op, system=system, guide=rest,
                          weights=LossWeights(1, 0, 0, 0, 0), chamfer_target="surface", workers=1)
        batch = IterationBatch(cameras=[], def_samples=sample_surface(rest, 200, seed=1))
        result = total_loss(ctx, identity_jacobians(rest.face_count), np.zeros(3), batch)
        assert result.breakdown.cd < 1e-24
        assert np.abs(result.d_jacobians).max() < 1e-12

    def test_unknown_chamfer_target(self, small_setup):
        from core.errors import ConfigValidationError

        rest, guide, op, system, _ = small_setup
        with pytest.raises(ConfigValidationError):
            LossContext(rest=rest, op=op, system=system, guide=guide, chamfer_target="nearest")
