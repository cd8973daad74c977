"""
Pinhole cameras and camera-rig sampling.
World space is y-up; camera space looks down -z, depth = -z.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from config import CAMERA_DISTANCE_FACTOR, CAMERA_FOV_DEG, ELEVATION_RANGE_DEG, LOSS_RESOLUTION
from core.errors import RenderError
from core.mesh import TriMesh

logger = logging.getLogger(__name__)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov: float = CAMERA_FOV_DEG              # vertical, degrees
    resolution: Tuple[int, int] = LOSS_RESOLUTION   # (width, height)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            value = np.array(getattr(self, name), dtype=np.float64).reshape(3)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))

        if not (0.0 < self.near < self.far):
            raise RenderError(f"camera needs 0 < near < far (got {self.near}, {self.far})")
        if not (0.0 < self.fov < 180.0):
            raise RenderError(f"vertical fov must be in (0, 180) degrees, got {self.fov}")
        if min(self.resolution) < 1:
            raise RenderError(f"invalid resolution {self.resolution}")
        view = self.look_at - self.position
        if np.linalg.norm(view) == 0.0:
            raise RenderError("camera position and look_at coincide")
        if np.linalg.norm(np.cross(_unit(view), self.up)) < 1e-9:
            raise RenderError("camera up vector is parallel to the view direction")

    # ── Frame ────────────────────────────────────────────────────────────

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def forward(self) -> np.ndarray:
        return _unit(self.look_at - self.position)

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are right, up, back."""
        f = self.forward
        right = _unit(np.cross(f, self.up))
        true_up = np.cross(right, f)
        return np.stack([right, true_up, -f])

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return (self.height / 2.0) / np.tan(np.radians(self.fov) / 2.0)

    @property
    def principal_point(self) -> Tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """World points (N,3) -> (pixel coords (N,2) as (x, y-down), depth (N,))."""
        pc = self.to_camera(points)
        depth = -pc[:, 2]
        safe = np.where(np.abs(depth) > 1e-300, depth, 1e-300)
        cx, cy = self.principal_point
        f = self.focal
        xy = np.stack([cx + f * pc[:, 0] / safe, cy - f * pc[:, 1] / safe], axis=1)
        return xy, depth

    def pixel_rays(self, xy: np.ndarray) -> np.ndarray:
        """Camera-space ray directions (N,3) through pixel coords, z = -1."""
        cx, cy = self.principal_point
        f = self.focal
        return np.stack([(xy[:, 0] - cx) / f, -(xy[:, 1] - cy) / f, -np.ones(len(xy))], axis=1)

    def with_resolution(self, resolution: Tuple[int, int]) -> "Camera":
        return Camera(self.position, self.look_at, self.up, self.fov, resolution, self.near, self.far)

    # ── Serialization ────────────────────────────────────────────────────

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov": self.fov,
            "resolution": list(self.resolution),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        return cls(
            position=data["position"],
            look_at=data["look_at"],
            up=data.get("up", [0.0, 1.0, 0.0]),
            fov=float(data.get("fov", CAMERA_FOV_DEG)),
            resolution=tuple(data.get("resolution", LOSS_RESOLUTION)),
            near=float(data.get("near", 0.01)),
            far=float(data.get("far", 100.0)),
        )


def orbit_camera(center: np.ndarray, distance: float, azimuth: float, elevation: float,
                 resolution: Tuple[int, int] = LOSS_RESOLUTION, fov: float = CAMERA_FOV_DEG) -> Camera:
    """Camera on a sphere around `center`; azimuth 0 looks from +z, 90 from +x."""
    az, el = np.radians(azimuth), np.radians(elevation)
    offset = distance * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    up = np.array([0.0, 1.0, 0.0])
    if abs(elevation) > 89.0:
        up = np.array([0.0, 0.0, -1.0 if elevation > 0 else 1.0])
    return Camera(
        position=np.asarray(center) + offset,
        look_at=center,
        up=up,
        fov=fov,
        resolution=resolution,
        near=0.01 * distance,
        far=10.0 * distance,
    )


def sample_cameras(seed: int, count: int, mesh: TriMesh, stratified: bool = False,
                   resolution: Tuple[int, int] = LOSS_RESOLUTION, fov: float = CAMERA_FOV_DEG,
                   rng: Optional[np.random.Generator] = None) -> List[Camera]:
    """
    Random orbit cameras framing the mesh bounding sphere.
    Stratified mode returns the evaluation rig: azimuth 360*i/count at elevation 0.
    """
    if count < 1:
        raise ValueError("camera count must be >= 1")
    center = mesh.centroid()
    distance = CAMERA_DISTANCE_FACTOR * mesh.bounding_radius(center)
    if distance <= 0.0:
        distance = 1.0

    if stratified:
        azimuths = 360.0 * np.arange(count) / count
        elevations = np.zeros(count)
    else:
        rng = rng if rng is not None else np.random.default_rng(seed)
        azimuths = rng.uniform(0.0, 360.0, size=count)
        elevations = rng.uniform(ELEVATION_RANGE_DEG[0], ELEVATION_RANGE_DEG[1], size=count)

    return [orbit_camera(center, distance, az, el, resolution, fov) for az, el in zip(azimuths, elevations)]


# ── Camera files ──────────────────────────────────────────────────────────

def load_camera_file(path) -> List[dict]:
    """
    Read a view list: {"views": [{"tag", "image", "position", "look_at", "up",
    "fov", "resolution"}, ...]}. Returns dicts with a parsed "camera" entry.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    views = []
    for i, entry in enumerate(data.get("views", [])):
        views.append({
            "tag": entry.get("tag", f"aux-{i}"),
            "image": entry.get("image", f"{entry.get('tag', f'aux-{i}')}.png"),
            "camera": Camera.from_dict(entry),
        })
    return views


def save_camera_file(path, views: List[dict]) -> None:
    payload = {"views": []}
    for v in views:
        entry = v["camera"].to_dict()
        entry["tag"] = v["tag"]
        entry["image"] = v.get("image", f"{v['tag']}.png")
        payload["views"].append(entry)
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
