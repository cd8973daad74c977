"""
Synthetic demo inputs.
Writes a small base/guide garment pair, guidance image, textured views, a
parametric body and a run config so the whole pipeline can run offline.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from core.body import make_test_body, save_body
from core.camera import orbit_camera, save_camera_file
from core.mesh import TriMesh, save_obj
from core.primitives import inflate, rotation_y, sleeveless_shirt
from core.rasterizer import render, render_textured, shade_normals, to_uint8
from core.texture import default_view_rig

logger = logging.getLogger(__name__)

DEMO_SETTINGS = {
    "seed": 0,
    "provider": "stub",
    "yaw_search": True,
    "optimizer": {
        "iterations": 60,
        "cameras_per_iter": 2,
        "surface_samples": 500,
        "resolution": [64, 64],
        "checkpoint_every": 20,
        "early_stop_patience": 60,
        "learning_rate": 1e-2,
        "learning_rate_min": 1e-3,
        "workers": 2,
        "log_every": 20,
        "show_progress": False,
    },
    "texture": {"size": 64, "dilation": 2},
    "fit": {"stage_iterations": [40, 40, 20], "samples": 400, "log_every": 20, "show_progress": False},
    "evaluation": {"views": 8, "resolution": [64, 64]},
}


def stripe_texture(size: int = 64) -> np.ndarray:
    """Colour ramp that is periodic in u, so tube seams stay continuous."""
    j = (np.arange(size) + 0.5) / size
    i = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(j, 1.0 - i)
    angle = 2 * np.pi * u
    return np.stack([0.5 + 0.5 * np.cos(angle), v, 0.5 + 0.5 * np.sin(angle)], axis=-1)


def demo_meshes() -> Tuple[TriMesh, TriMesh]:
    """Base template and a wider, inflated target in the same frame."""
    base = sleeveless_shirt(segments=16, rings=8, name="base")
    wider = base.with_vertices(base.vertices * np.array([1.15, 1.05, 1.1]), name="guide")
    return base, inflate(wider, 0.02)


def make_demo(directory, view_resolution: Tuple[int, int] = (128, 128), texture_size: int = 64,
              guide_yaw: float = 90.0) -> Dict[str, Path]:
    """Write demo inputs and run.json into `directory`; returns the written paths."""
    directory = Path(directory)
    views_dir = directory / "views"
    views_dir.mkdir(parents=True, exist_ok=True)

    base, guide = demo_meshes()
    paths = {
        "base": directory / "base.obj",
        "guide": directory / "guide.obj",
        "guidance": directory / "guidance.png",
        "body": directory / "body.g3db",
        "cameras": views_dir / "cameras.json",
        "config": directory / "run.json",
    }
    save_obj(base, paths["base"])
    # the guide ships yawed so alignment has something to recover
    save_obj(guide.with_vertices(guide.vertices @ rotation_y(guide_yaw).T), paths["guide"])

    from PIL import Image

    center = guide.centroid()
    front = orbit_camera(center, 2.2 * guide.bounding_radius(center), 0.0, 0.0, view_resolution)
    Image.fromarray(to_uint8(shade_normals(render(guide, front, 0.0)))).save(paths["guidance"])

    texture = stripe_texture(texture_size)
    views = []
    for tag, camera in default_view_rig(guide, view_resolution):
        image = render_textured(guide, camera, texture)
        Image.fromarray(to_uint8(image)).save(views_dir / f"{tag}.png")
        views.append({"tag": tag, "image": f"{tag}.png", "camera": camera})
    save_camera_file(paths["cameras"], views)

    save_body(make_test_body(radius=0.1, height=0.6), paths["body"])

    config = dict(DEMO_SETTINGS)
    config.update({
        "base_mesh": paths["base"].name,
        "guide_mesh": paths["guide"].name,
        "guidance_image": paths["guidance"].name,
        "body_file": paths["body"].name,
        "views_dir": "views",
        "output_dir": "output",
    })
    config["texture"] = dict(config["texture"], size=texture_size)
    paths["config"].write_text(json.dumps(config, indent=2), encoding="utf-8")
    logger.info("Demo inputs written to %s", directory)
    return paths
