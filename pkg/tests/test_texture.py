"""
Pytest tests for texel rasterization, multi-view backprojection, greedy view
ordering, seam dilation and texture export.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

# Add project root to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.cache import ArrayCache
from core.camera import orbit_camera, save_camera_file
from core.errors import MissingUVError, RenderError, ResolutionMismatchError
from core.mesh import TriMesh
from core.primitives import grid, icosphere, uv_sphere
from core.rasterizer import render_textured, to_uint8
from core.texture import (
    TextureAtlas,
    ViewImage,
    backproject_view,
    backproject_views,
    default_depth_tolerance,
    default_view_rig,
    finalize_texture,
    load_views,
    rasterize_uv_points,
    save_texture,
    select_views,
    texture_from_views,
    unfilled_visible_count,
)

CUBE_POSES = [("front", 0.0, 0.0), ("back", 180.0, 0.0), ("left", 270.0, 0.0),
              ("right", 90.0, 0.0), ("top", 0.0, 90.0), ("bottom", 0.0, -90.0)]


def sphere_texture(size):
    """Colors that are a smooth function of the sphere point behind each texel."""
    j, i = np.meshgrid(np.arange(size), np.arange(size))
    u = (j + 0.5) / size
    v = 1.0 - (i + 0.5) / size
    lat = np.pi * (1.0 - v)
    lon = 2.0 * np.pi * u
    p = np.stack([np.sin(lat) * np.cos(lon), np.cos(lat), np.sin(lat) * np.sin(lon)], axis=-1)
    mix = np.array([[0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.8, 0.0, 0.6]])
    return 0.5 + 0.3 * (p @ mix.T) / np.linalg.norm(mix, axis=1)


def cube_views(mesh, texture, resolution):
    views = []
    for tag, az, el in CUBE_POSES:
        cam = orbit_camera(np.zeros(3), 6.0, az, el, resolution, fov=25.0)
        views.append(ViewImage(render_textured(mesh, cam, texture), cam, tag))
    return views


def constant_view(color, resolution=(64, 64), tag="front"):
    cam = orbit_camera(np.zeros(3), 2.0, 0.0, 0.0, resolution)
    rgb = np.broadcast_to(np.asarray(color, dtype=np.float64), (resolution[1], resolution[0], 3))
    return ViewImage(rgb.copy(), cam, tag)


@pytest.fixture(scope="module")
def sphere():
    return uv_sphere(16, 32)


# ── Texel Map ─────────────────────────────────────────────────────────────

class TestTexelMap:
    """Surface points behind texels."""

    def test_full_chart_grid(self):
        mesh = grid(2, 2, size=(1.0, 1.0))
        texels = rasterize_uv_points(mesh, 16)
        assert texels.size == (16, 16)
        assert texels.covered.all()
        assert texels.overlap_count == 0

        j, i = np.meshgrid(np.arange(16), np.arange(16))
        expected_x = (j + 0.5) / 16 - 0.5
        expected_y = (1.0 - (i + 0.5) / 16) - 0.5
        np.testing.assert_allclose(texels.points[..., 0], expected_x, atol=1e-12)
        np.testing.assert_allclose(texels.points[..., 1], expected_y, atol=1e-12)
        np.testing.assert_allclose(texels.normals, np.broadcast_to([0.0, 0.0, 1.0], texels.normals.shape),
                                   atol=1e-12)

    def test_rectangular_size(self):
        texels = rasterize_uv_points(grid(1, 1), (8, 12))
        assert texels.size == (8, 12)

    def test_missing_uvs(self):
        with pytest.raises(MissingUVError):
            rasterize_uv_points(icosphere(1), 16)

    def test_sphere_points_on_surface(self, sphere):
        texels = rasterize_uv_points(sphere, 32)
        radius = np.linalg.norm(texels.points[texels.covered], axis=1)
        assert radius.max() <= 1.0 + 1e-12
        assert radius.min() > 0.95
        assert texels.covered.mean() > 0.9

    def test_cache_hit(self, sphere, tmp_path):
        cache = ArrayCache(tmp_path)
        first = rasterize_uv_points(sphere, 24, cache)
        second = rasterize_uv_points(sphere, 24, cache)
        assert cache.hits == 1
        np.testing.assert_array_equal(first.face_ids, second.face_ids)
        np.testing.assert_array_equal(first.points, second.points)


# ── View Images ───────────────────────────────────────────────────────────

class TestViewImage:
    """Input validation of reference views."""

    def test_resolution_mismatch(self):
        cam = orbit_camera(np.zeros(3), 2.0, 0.0, 0.0, (32, 32))
        with pytest.raises(ResolutionMismatchError):
            ViewImage(np.zeros((16, 32, 3)), cam, "front")

    @pytest.mark.parametrize("rgb", [np.zeros((32, 32)), np.full((32, 32, 3), 1.5), np.full((32, 32, 3), -0.1)],
                             ids=["gray", "above-one", "negative"])
    def test_invalid_pixels(self, rgb):
        cam = orbit_camera(np.zeros(3), 2.0, 0.0, 0.0, (32, 32))
        with pytest.raises(RenderError):
            ViewImage(rgb, cam, "front")


# ── Backprojection ────────────────────────────────────────────────────────

class TestBackprojection:
    """Writing view colors into unfilled texels."""

    def test_constant_view_on_plane(self):
        mesh = grid(1, 1, size=(1.0, 1.0))
        texels = rasterize_uv_points(mesh, 16)
        atlas = backproject_view(TextureAtlas.empty(texels.size), texels, mesh, constant_view([0.2, 0.4, 0.6]))
        assert atlas.fill_mask.mean() > 0.75
        np.testing.assert_allclose(atlas.color[atlas.fill_mask], [[0.2, 0.4, 0.6]], atol=1e-12)
        assert np.all(atlas.weight[atlas.fill_mask] > 0.2)
        assert np.all(atlas.source[atlas.fill_mask] == 0)
        assert not atlas.color[~atlas.fill_mask].any()

    def test_filled_texels_untouched(self):
        mesh = grid(1, 1, size=(1.0, 1.0))
        texels = rasterize_uv_points(mesh, 16)
        atlas = TextureAtlas.empty(texels.size)
        atlas.fill_mask[:8] = True
        atlas.color[:8] = 0.9
        atlas.weight[:8] = 1.0
        out = backproject_view(atlas, texels, mesh, constant_view([0.1, 0.1, 0.1]), view_index=3)
        np.testing.assert_array_equal(out.color[:8], 0.9)
        assert np.all(out.source[:8] == -1)
        assert np.all(out.source[8:][out.fill_mask[8:]] == 3)
        # the input atlas is not modified
        assert not atlas.fill_mask[8:].any()

    def test_back_facing_view_writes_nothing(self):
        mesh = grid(1, 1, size=(1.0, 1.0))
        texels = rasterize_uv_points(mesh, 16)
        cam = orbit_camera(np.zeros(3), 2.0, 180.0, 0.0, (64, 64))
        view = ViewImage(np.full((64, 64, 3), 0.5), cam, "back")
        atlas = backproject_view(TextureAtlas.empty(texels.size), texels, mesh, view)
        assert not atlas.fill_mask.any()

    def test_simultaneous_views_average(self):
        mesh = grid(1, 1, size=(1.0, 1.0))
        texels = rasterize_uv_points(mesh, 16)
        a = constant_view([0.2, 0.2, 0.2])
        b = constant_view([0.6, 0.6, 0.6], tag="aux-0")
        atlas = backproject_views(TextureAtlas.empty(texels.size), texels, mesh, [a, b])
        # identical cameras give identical weights
        np.testing.assert_allclose(atlas.color[atlas.fill_mask], 0.4, atol=1e-12)

    def test_occluded_texels_skipped(self):
        """A plane hidden behind a larger one takes no color from the front view."""
        hidden = grid(1, 1, size=(0.5, 0.5))
        blocker = grid(1, 1, size=(2.0, 2.0))
        blocker = blocker.with_vertices(blocker.vertices + [0.0, 0.0, 0.5])
        # the hidden plane's faces come first, so they own every (overlapping) texel
        scene = TriMesh(np.vstack([hidden.vertices, blocker.vertices]),
                        np.vstack([hidden.faces, blocker.faces + hidden.vertex_count]),
                        uvs=np.vstack([hidden.uvs, blocker.uvs]),
                        uv_faces=np.vstack([hidden.uv_faces, blocker.uv_faces + len(hidden.uvs)]))
        texels = rasterize_uv_points(scene, 16)
        assert texels.overlap_count > 0
        assert np.all(texels.face_ids[texels.covered] < hidden.face_count)

        view = constant_view([0.3, 0.3, 0.3])
        tau = default_depth_tolerance(scene)
        assert unfilled_visible_count(TextureAtlas.empty(texels.size), texels, scene, view, tau) == 0
        atlas = backproject_view(TextureAtlas.empty(texels.size), texels, scene, view)
        assert not atlas.fill_mask.any()

    def test_fold_sharing_a_vertex_does_not_leak(self):
        """A face folded over its neighbour hides it even though they share a vertex."""
        vertices = np.array([
            [-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.0, 0.5, 0.0],   # flat face
            [-0.9, -1.2, 0.4], [0.9, -1.2, 0.4],                     # fold over it toward the camera
        ])
        faces = np.array([[0, 1, 2], [2, 3, 4]])
        uvs = np.array([[0.02, 0.02], [0.48, 0.02], [0.25, 0.98],
                        [0.98, 0.98], [0.52, 0.02], [0.98, 0.02]])
        uv_faces = np.array([[0, 1, 2], [3, 4, 5]])
        scene = TriMesh(vertices, faces, uvs=uvs, uv_faces=uv_faces)
        texels = rasterize_uv_points(scene, 16)
        hidden = texels.covered & (texels.face_ids == 0)
        assert hidden.sum() > 20

        view = constant_view([0.3, 0.3, 0.3])
        tau = default_depth_tolerance(scene)
        audit = []
        atlas = backproject_view(TextureAtlas.empty(texels.size), texels, scene, view, audit=audit)
        assert not atlas.fill_mask[hidden].any()
        assert atlas.fill_mask[texels.covered & (texels.face_ids == 1)].any()
        assert all(np.all(samples.depth_residual < tau) for samples in audit)


# ── View Ordering ─────────────────────────────────────────────────────────

def brute_force_order(atlas, texels, mesh, views):
    """Apply front/back, then repeatedly try every view and keep the one that fills most."""
    paired = [i for tag in ("front", "back") for i, v in enumerate(views) if v.tag == tag]
    atlas = backproject_views(atlas, texels, mesh, [views[i] for i in paired], paired)
    order = list(paired)
    remaining = [i for i in range(len(views)) if i not in paired]
    while remaining:
        gains = []
        for i in remaining:
            trial = backproject_view(atlas, texels, mesh, views[i], i)
            gains.append(int(trial.fill_mask.sum() - atlas.fill_mask.sum()))
        best = max(range(len(remaining)), key=lambda k: (gains[k], -k))
        if gains[best] == 0:
            break
        index = remaining.pop(best)
        atlas = backproject_view(atlas, texels, mesh, views[index], index)
        order.append(index)
    return order


class TestViewOrder:
    """Greedy ordering by visible unfilled texels."""

    def test_matches_brute_force(self, sphere):
        texture = sphere_texture(32)
        views = cube_views(sphere, texture, (96, 96))
        # shuffle so the pair is not simply the first two entries
        views = [views[i] for i in (2, 0, 4, 1, 5, 3)]
        texels = rasterize_uv_points(sphere, 32)
        order = select_views(TextureAtlas.empty(texels.size), texels, sphere, views)
        assert order[:2] == [1, 3]
        assert order == brute_force_order(TextureAtlas.empty(texels.size), texels, sphere, views)

    def test_useless_view_left_out(self):
        mesh = grid(1, 1, size=(1.0, 1.0))
        texels = rasterize_uv_points(mesh, 16)
        front = constant_view([0.5, 0.5, 0.5])
        again = constant_view([0.1, 0.1, 0.1], tag="aux-0")
        assert select_views(TextureAtlas.empty(texels.size), texels, mesh, [front, again]) == [0]

    def test_default_rig(self, sphere):
        rig = default_view_rig(sphere, (32, 32))
        assert [tag for tag, _ in rig] == ["front", "back", "aux-0", "aux-1", "aux-2", "aux-3"]
        assert rig[0][1].position[2] > 0
        assert rig[1][1].position[2] < 0
        assert all(cam.resolution == (32, 32) for _, cam in rig)


# ── Finalize ──────────────────────────────────────────────────────────────

class TestFinalize:
    """Seam dilation and the gray fill."""

    def single_texel(self):
        atlas = TextureAtlas.empty((7, 7))
        atlas.fill_mask[3, 3] = True
        atlas.color[3, 3] = [1.0, 0.0, 0.0]
        atlas.weight[3, 3] = 1.0
        atlas.source[3, 3] = 2
        return atlas

    @pytest.mark.parametrize("dilation,dilated", [(0, 0), (1, 4), (2, 12)], ids=["none", "one", "two"])
    def test_diamond_growth(self, dilation, dilated):
        out, report = finalize_texture(self.single_texel(), dilation=dilation)
        assert report.projected == 1
        assert report.dilated == dilated
        assert report.unfilled == 49 - 1 - dilated
        assert out.fill_mask.sum() == 1 + dilated
        np.testing.assert_array_equal(out.color[out.fill_mask], [[1.0, 0.0, 0.0]] * (1 + dilated))
        assert np.all(out.source[out.fill_mask] == 2)
        np.testing.assert_array_equal(out.color[~out.fill_mask], 0.5)

    def test_report(self):
        chart = np.zeros((7, 7), dtype=bool)
        chart[2:5, 2:5] = True
        out, report = finalize_texture(self.single_texel(), dilation=1, gray=0.25, chart_mask=chart)
        assert report.chart_texels == 9
        assert report.chart_coverage == pytest.approx(1 / 9)
        assert report.coverage == pytest.approx(5 / 49)
        data = report.to_dict()
        assert data["needs_inpainting"] is True
        assert data["unfilled"] == 44
        np.testing.assert_array_equal(out.color[~out.fill_mask], 0.25)

    def test_empty_atlas_all_gray(self):
        out, report = finalize_texture(TextureAtlas.empty((4, 4)))
        assert report.unfilled == 16
        np.testing.assert_array_equal(out.color, 0.5)


# ── End to End ────────────────────────────────────────────────────────────

class TestTextureFromViews:
    """Recovering a known texture from renders of it."""

    def test_sphere_recovered(self, sphere):
        texture = sphere_texture(64)
        views = cube_views(sphere, texture, (256, 256))
        result = texture_from_views(sphere, views, texture_size=64, dilation=0)

        projected = result.atlas.fill_mask & result.texel_map.covered
        error = np.abs(result.atlas.color[projected] - texture[projected]).mean()
        assert error < 2.0 / 255.0
        assert result.report.chart_coverage >= 0.95
        assert result.report.view_order[:2] == ["front", "back"]
        assert len(result.order) == len(result.report.view_order)

    def test_no_views(self, sphere):
        with pytest.raises(RenderError):
            texture_from_views(sphere, [], texture_size=16)

    def test_save_texture(self, sphere, tmp_path):
        views = cube_views(sphere, sphere_texture(16), (48, 48))
        result = texture_from_views(sphere, views, texture_size=16, dilation=1)
        paths = save_texture(result, sphere, tmp_path, stem="shirt")
        for key in ("texture", "mtl", "obj", "coverage"):
            assert Path(paths[key]).is_file()
        with Image.open(paths["texture"]) as img:
            assert img.size == (16, 16)
        coverage = json.loads(Path(paths["coverage"]).read_text())
        assert coverage["view_order"][:2] == ["front", "back"]
        assert "map_Kd shirt.png" in Path(paths["mtl"]).read_text()
        assert "mtllib shirt.mtl" in Path(paths["obj"]).read_text()

    def test_load_views(self, sphere, tmp_path):
        views = cube_views(sphere, sphere_texture(16), (40, 40))[:2]
        for view in views:
            Image.fromarray(to_uint8(view.rgb)).save(tmp_path / f"{view.tag}.png")
        save_camera_file(tmp_path / "cameras.json", [{"tag": v.tag, "camera": v.camera} for v in views])

        loaded = load_views(tmp_path / "cameras.json")
        assert [v.tag for v in loaded] == ["front", "back"]
        for original, again in zip(views, loaded):
            np.testing.assert_allclose(again.rgb, original.rgb, atol=0.5 / 255 + 1e-12)
            np.testing.assert_allclose(again.camera.position, original.camera.position)
