"""
Parametric body model and body-to-garment fitting.
Blendshapes + linear blend skinning with analytic parameter gradients, a
three-stage Adam fit driving garment samples onto the body surface, and a
collision penalty keeping the body a margin inside the garment.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from config import (
    COLLISION_MARGIN,
    FIT_COLLISION_WEIGHT,
    FIT_LR_DECAY,
    FIT_LR_POSE,
    FIT_LR_RIGID,
    FIT_LR_SHAPE,
    FIT_SAMPLES,
    FIT_STAGE_ITERATIONS,
    FIT_WEIGHT_TOLERANCE,
    LOG_EVERY,
    SEED,
    SHOW_PROGRESS,
)
from core.container import read_container, write_container
from core.errors import BodyModelError, ConfigValidationError, DivergenceError
from core.losses import sample_surface, surface_chamfer
from core.mesh import TriMesh
from core.optimizer import Adam, cosine_lr
from core.primitives import capped_cylinder
from core.proximity import ClosestPoints, MeshProximity

logger = logging.getLogger(__name__)

_I3 = np.eye(3)


# ── Body model ────────────────────────────────────────────────────────────

@dataclass
class ParametricBody:
    """
    Template mesh with S blendshapes and a J-joint skeleton.
    Joint rest transforms are pure translations to `joints`; parents[0] is -1
    and every other parent index precedes its child.
    """
    template: np.ndarray        # (V,3)
    faces: np.ndarray           # (F,3)
    shape_basis: np.ndarray     # (S,V,3)
    parents: np.ndarray         # (J,)
    joints: np.ndarray          # (J,3)
    weights: np.ndarray         # (V,J)
    name: str = "body"

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        V, J = len(self.template), len(self.parents)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64).reshape(-1, V, 3)

        if self.joints.shape != (J, 3):
            raise BodyModelError(f"expected {J} joint positions, got {len(self.joints)}")
        if self.weights.shape != (V, J):
            raise BodyModelError(f"skinning weights must be ({V}, {J}), got {self.weights.shape}")
        if J == 0 or self.parents[0] != -1:
            raise BodyModelError("skeleton root (joint 0) must have parent -1")
        bad = [j for j in range(1, J) if not 0 <= self.parents[j] < j]
        if bad:
            raise BodyModelError(f"joints {bad} must have a parent with a smaller index")
        if np.any(self.weights < 0):
            raise BodyModelError("skinning weights must be non-negative")
        row_error = np.abs(self.weights.sum(axis=1) - 1.0)
        if np.any(row_error > FIT_WEIGHT_TOLERANCE):
            raise BodyModelError(
                f"skinning weight rows must sum to 1 (worst vertex {int(np.argmax(row_error))}, "
                f"off by {row_error.max():.3g})"
            )

    @property
    def vertex_count(self) -> int:
        return len(self.template)

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def shape_count(self) -> int:
        return len(self.shape_basis)

    def template_mesh(self) -> TriMesh:
        return TriMesh(self.template, self.faces, name=self.name)


@dataclass
class FitParams:
    translation: np.ndarray     # (3,) metres
    rotation: np.ndarray        # (3,) axis-angle, about the origin
    scale: float
    shape: np.ndarray           # (S,)
    pose: np.ndarray            # (J,3) per-joint axis-angle

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1, 3)
        if not self.scale > 0:
            raise BodyModelError(f"scale must be positive, got {self.scale}")
        for name in ("translation", "rotation", "shape", "pose"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise BodyModelError(f"fit parameter '{name}' is not finite")
        if not np.isfinite(self.scale):
            raise BodyModelError("fit parameter 'scale' is not finite")

    @classmethod
    def identity(cls, body: ParametricBody) -> "FitParams":
        return cls(np.zeros(3), np.zeros(3), 1.0, np.zeros(body.shape_count), np.zeros((body.joint_count, 3)))

    def to_free(self) -> Dict[str, np.ndarray]:
        """Unconstrained optimizer variables; scale is stored as its log."""
        return {
            "translation": self.translation.copy(),
            "rotation": self.rotation.copy(),
            "log_scale": np.array([np.log(self.scale)]),
            "shape": self.shape.copy(),
            "pose": self.pose.copy(),
        }

    @classmethod
    def from_free(cls, free: Dict[str, np.ndarray]) -> "FitParams":
        return cls(free["translation"], free["rotation"], float(np.exp(free["log_scale"][0])),
                   free["shape"], free["pose"])

    def rotation_matrix(self) -> np.ndarray:
        return rodrigues(self.rotation)

    def to_dict(self) -> dict:
        return {
            "translation": self.translation.tolist(),
            "rotation": self.rotation.tolist(),
            "scale": self.scale,
            "shape": self.shape.tolist(),
            "pose": self.pose.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitParams":
        return cls(data["translation"], data["rotation"], data["scale"], data["shape"], data["pose"])


# ── Rotations ─────────────────────────────────────────────────────────────

def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _rodrigues_coefficients(theta: float):
    """a = sin t / t, b = (1 - cos t) / t^2 and their derivatives divided by t."""
    if theta < 1e-3:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, -1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0
    s, c = np.sin(theta), np.cos(theta)
    return (
        s / theta,
        (1.0 - c) / theta ** 2,
        (theta * c - s) / theta ** 3,
        (theta * s - 2.0 * (1.0 - c)) / theta ** 4,
    )


def rodrigues(r: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector; exactly identity at zero."""
    r = np.asarray(r, dtype=np.float64)
    a, b, _, _ = _rodrigues_coefficients(float(np.linalg.norm(r)))
    K = _skew(r)
    return _I3 + a * K + b * (K @ K)


def rodrigues_vjp(r: np.ndarray, grad_matrix: np.ndarray) -> np.ndarray:
    """Pull dL/dR (3x3) back to dL/dr (3,)."""
    r = np.asarray(r, dtype=np.float64)
    a, b, ca, cb = _rodrigues_coefficients(float(np.linalg.norm(r)))
    K = _skew(r)
    K2 = K @ K
    out = np.empty(3)
    for i in range(3):
        E = _skew(_I3[i])
        dR = ca * r[i] * K + a * E + cb * r[i] * K2 + b * (E @ K + K @ E)
        out[i] = np.sum(grad_matrix * dR)
    return out


def rotation_error_degrees(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices."""
    return float(np.degrees(Rotation.from_matrix(R_a @ R_b.T).magnitude()))


# ── Forward model ─────────────────────────────────────────────────────────

@dataclass
class _Posed:
    shaped: np.ndarray          # (V,3) template + blendshapes
    offsets: np.ndarray         # (V,J,3) shaped - joints
    local: np.ndarray           # (J,3,3)
    world: np.ndarray           # (J,3,3) accumulated joint rotations
    drift: np.ndarray           # (J,3) posed joint minus rest joint
    skinned: np.ndarray         # (V,3)
    root: np.ndarray            # (3,3) global rotation
    vertices: np.ndarray        # (V,3)


def _pose(body: ParametricBody, params: FitParams) -> _Posed:
    if len(params.shape) != body.shape_count or len(params.pose) != body.joint_count:
        raise BodyModelError(
            f"params carry {len(params.shape)} shape / {len(params.pose)} joint values, "
            f"body has {body.shape_count} / {body.joint_count}"
        )
    shaped = body.template + np.einsum("s,svd->vd", params.shape, body.shape_basis)

    J = body.joint_count
    local = np.stack([rodrigues(p) for p in params.pose])
    world = np.empty((J, 3, 3))
    drift = np.zeros((J, 3))
    for j in range(J):
        p = body.parents[j]
        if p < 0:
            world[j] = local[j]
        else:
            world[j] = world[p] @ local[j]
            drift[j] = drift[p] + (world[p] - _I3) @ (body.joints[j] - body.joints[p])

    # written as a displacement so the rest pose reproduces the template exactly
    offsets = shaped[:, None, :] - body.joints[None, :, :]
    moved = np.einsum("jab,vjb->vja", world - _I3, offsets) + drift[None]
    skinned = shaped + np.einsum("vj,vja->va", body.weights, moved)

    root = rodrigues(params.rotation)
    vertices = params.scale * (skinned @ root.T) + params.translation
    return _Posed(shaped, offsets, local, world, drift, skinned, root, vertices)


def pose_body(body: ParametricBody, params: FitParams) -> TriMesh:
    """scale * R * LBS(template + sum beta_i S_i, pose) + t."""
    return TriMesh(_pose(body, params).vertices, body.faces, name=f"{body.name}_posed")


def pose_body_vjp(body: ParametricBody, params: FitParams, grad_vertices: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradient of a scalar loss w.r.t. the free fit variables, given dL/d(vertices).
    Keys match FitParams.to_free().
    """
    posed = _pose(body, params)
    g = np.asarray(grad_vertices, dtype=np.float64)
    s = params.scale

    d_root = s * g.T @ posed.skinned
    d_skinned = s * g @ posed.root

    weighted = body.weights[:, :, None] * d_skinned[:, None, :]        # (V,J,3)
    d_world = np.einsum("vja,vjb->jab", weighted, posed.offsets)
    d_drift = weighted.sum(axis=0)
    d_shaped = d_skinned + np.einsum("jba,vjb->va", posed.world - _I3, weighted)

    d_local = np.empty_like(posed.local)
    for j in reversed(range(body.joint_count)):
        p = body.parents[j]
        if p < 0:
            d_local[j] = d_world[j]
            continue
        d_local[j] = posed.world[p].T @ d_world[j]
        d_world[p] += d_world[j] @ posed.local[j].T
        d_world[p] += np.outer(d_drift[j], body.joints[j] - body.joints[p])
        d_drift[p] += d_drift[j]

    return {
        "translation": g.sum(axis=0),
        "rotation": rodrigues_vjp(params.rotation, d_root),
        "log_scale": np.array([np.sum(g * (posed.vertices - params.translation))]),
        "shape": np.einsum("vd,svd->s", d_shaped, body.shape_basis),
        "pose": np.stack([rodrigues_vjp(params.pose[j], d_local[j]) for j in range(body.joint_count)]),
    }


# ── Collision ─────────────────────────────────────────────────────────────

def _scatter_closest(vertex_count: int, faces: np.ndarray, closest: ClosestPoints,
                     grad_points: np.ndarray) -> np.ndarray:
    out = np.zeros((vertex_count, 3))
    tri = faces[closest.face_ids]
    for k in range(3):
        np.add.at(out, tri[:, k], closest.bary[:, k:k + 1] * grad_points)
    return out


def penetration_depths(body_mesh: TriMesh, garment: TriMesh, margin: float = COLLISION_MARGIN,
                       proximity: Optional[MeshProximity] = None) -> Tuple[np.ndarray, ClosestPoints, np.ndarray]:
    """Per garment vertex max(0, margin - (g - p).n), with p the closest body point."""
    proximity = proximity if proximity is not None else MeshProximity(body_mesh)
    closest = proximity.query(garment.vertices)
    normals = body_mesh.face_normals()[closest.face_ids]
    signed = np.einsum("ij,ij->i", garment.vertices - closest.points, normals)
    return np.maximum(0.0, margin - signed), closest, normals


def collision_penalty(body_mesh: TriMesh, garment: TriMesh, margin: float = COLLISION_MARGIN,
                      proximity: Optional[MeshProximity] = None) -> Tuple[float, np.ndarray]:
    """
    Mean squared penetration depth and its gradient w.r.t. body vertices
    (chain through pose_body_vjp for parameter gradients). Descending the
    gradient moves the body inward, away from the garment.
    """
    depth, closest, normals = penetration_depths(body_mesh, garment, margin, proximity)
    value = float(np.mean(depth * depth))
    grad_points = (2.0 * depth / len(depth))[:, None] * normals
    return value, _scatter_closest(body_mesh.vertex_count, body_mesh.faces, closest, grad_points)


def collision_penalty_params(body: ParametricBody, params: FitParams, garment: TriMesh,
                             margin: float = COLLISION_MARGIN) -> Tuple[float, Dict[str, np.ndarray]]:
    """Collision penalty of the posed body and its gradient w.r.t. the free fit variables."""
    value, grad_vertices = collision_penalty(pose_body(body, params), garment, margin)
    return value, pose_body_vjp(body, params, grad_vertices)


def penetration_fraction(body_mesh: TriMesh, garment: TriMesh, margin: float = 0.0) -> float:
    depth, _, _ = penetration_depths(body_mesh, garment, margin)
    return float(np.mean(depth > 0))


# ── Fitting ───────────────────────────────────────────────────────────────

STAGES = (
    ("rigid", ("translation", "rotation", "log_scale")),
    ("shape_pose", ("translation", "rotation", "log_scale", "shape", "pose")),
    ("collision", ("translation", "rotation", "log_scale", "shape", "pose")),
)


@dataclass
class FitConfig:
    stage_iterations: Tuple[int, int, int] = FIT_STAGE_ITERATIONS
    samples: int = FIT_SAMPLES
    lr_rigid: float = FIT_LR_RIGID
    lr_shape: float = FIT_LR_SHAPE
    lr_pose: float = FIT_LR_POSE
    lr_decay: float = FIT_LR_DECAY
    collision_weight: float = FIT_COLLISION_WEIGHT
    margin: float = COLLISION_MARGIN
    seed: int = SEED
    log_every: int = LOG_EVERY
    show_progress: bool = SHOW_PROGRESS

    def __post_init__(self):
        self.stage_iterations = tuple(int(n) for n in self.stage_iterations)
        if len(self.stage_iterations) != 3 or min(self.stage_iterations) < 0:
            raise ConfigValidationError(f"stage_iterations must be three counts >= 0, got {self.stage_iterations}")
        if self.samples < 1:
            raise ConfigValidationError(f"samples must be >= 1, got {self.samples}")
        if min(self.lr_rigid, self.lr_shape, self.lr_pose) <= 0:
            raise ConfigValidationError("fit learning rates must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigValidationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.margin < 0 or self.collision_weight < 0:
            raise ConfigValidationError("margin and collision_weight must be >= 0")

    def learning_rate(self, key: str) -> float:
        return {"shape": self.lr_shape, "pose": self.lr_pose}.get(key, self.lr_rigid)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["stage_iterations"] = list(self.stage_iterations)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigValidationError(f"unknown fit settings: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FitResult:
    params: FitParams
    body_mesh: TriMesh
    history: Dict[str, List[float]] = field(default_factory=dict)
    penetration_fraction: float = 0.0
    margin_violation_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "final_loss": {stage: (h[-1] if h else None) for stage, h in self.history.items()},
            "iterations": {stage: len(h) for stage, h in self.history.items()},
            "penetration_fraction": self.penetration_fraction,
            "margin_violation_fraction": self.margin_violation_fraction,
        }


def fit_loss(body: ParametricBody, params: FitParams, garment: TriMesh, points: np.ndarray,
             collision_weight: float = 0.0, margin: float = COLLISION_MARGIN):
    """Garment-to-body Chamfer (+ weighted collision penalty) and free-variable gradients."""
    body_mesh = pose_body(body, params)
    proximity = MeshProximity(body_mesh)
    value, grad_points, closest = surface_chamfer(points, body_mesh, proximity)
    # the closest body point moves with its face corners
    grad_vertices = _scatter_closest(body.vertex_count, body.faces, closest, -grad_points)
    if collision_weight > 0:
        c_value, c_grad = collision_penalty(body_mesh, garment, margin, proximity)
        value += collision_weight * c_value
        grad_vertices += collision_weight * c_grad
    return value, pose_body_vjp(body, params, grad_vertices)


def fit_body_to_garment(body: ParametricBody, garment: TriMesh, config: Optional[FitConfig] = None,
                        initial: Optional[FitParams] = None) -> FitResult:
    """Fit body pose and shape to a fixed garment in three stages; the garment is never modified."""
    config = config or FitConfig()
    params = initial if initial is not None else FitParams.identity(body)
    free = params.to_free()
    points = sample_surface(garment, config.samples, seed=config.seed).points
    history: Dict[str, List[float]] = {}

    for (stage, keys), iterations in zip(STAGES, config.stage_iterations):
        history[stage] = []
        weight = config.collision_weight if stage == "collision" else 0.0
        optimizers = {k: Adam(config.learning_rate(k)) for k in keys}
        logger.info("Body fit stage '%s': %d iterations over %s", stage, iterations, ", ".join(keys))

        for it in tqdm(range(iterations), desc=f"fit:{stage}", unit="it",
                       disable=not config.show_progress, leave=False):
            value, grads = fit_loss(body, FitParams.from_free(free), garment, points, weight, config.margin)
            if not np.isfinite(value) or not all(np.all(np.isfinite(grads[k])) for k in keys):
                raise DivergenceError(it, stage, value)
            history[stage].append(value)
            for k in keys:
                base = config.learning_rate(k)
                lr = cosine_lr(it, iterations, base, base * config.lr_decay)
                optimizers[k].step({k: free[k]}, {k: grads[k]}, lr=lr)
            if config.log_every and it % config.log_every == 0:
                logger.debug("fit %s iter %d: loss=%.6g scale=%.6g", stage, it, value, np.exp(free["log_scale"][0]))

        if history[stage]:
            logger.info("Body fit stage '%s' done: loss %.6g", stage, history[stage][-1])

    params = FitParams.from_free(free)
    body_mesh = pose_body(body, params)
    return FitResult(
        params=params,
        body_mesh=body_mesh,
        history=history,
        penetration_fraction=penetration_fraction(body_mesh, garment, 0.0),
        margin_violation_fraction=penetration_fraction(body_mesh, garment, config.margin),
    )


# ── Test body and file format ─────────────────────────────────────────────

BODY_MAGIC = b"G3DB"
BODY_VERSION = 1


def make_test_body(segments: int = 16, rings: int = 8, radius: float = 0.1, height: float = 1.0,
                   ellipticity: float = 1.25, blend_width: float = 0.2) -> ParametricBody:
    """
    Two-bone capped cylinder along y with an elliptic cross-section.
    Joint 0 sits at the bottom, joint 1 halfway up; weights blend smoothly over
    `blend_width` around the middle. Blendshape 0 widens the cross-section,
    blendshape 1 adds a bulge that vanishes at both ends.
    """
    mesh = capped_cylinder(segments=segments, rings=rings, radius=radius, height=height, name="test_body")
    template = mesh.vertices * np.array([ellipticity, 1.0, 1.0])
    y = template[:, 1]

    t = np.clip((y + blend_width / 2) / blend_width, 0.0, 1.0)
    upper = t * t * (3.0 - 2.0 * t)
    weights = np.stack([1.0 - upper, upper], axis=1)

    radial = 0.2 * template * np.array([1.0, 0.0, 1.0])
    bulge = radial * np.cos(np.pi * y / height)[:, None]
    joints = np.array([[0.0, -height / 2, 0.0], [0.0, 0.0, 0.0]])
    return ParametricBody(template, mesh.faces, np.stack([radial, bulge]), np.array([-1, 0]),
                          joints, weights, name="test_body")


def save_body(body: ParametricBody, path) -> None:
    arrays = {
        "template": body.template,
        "faces": body.faces,
        "shape_basis": body.shape_basis,
        "parents": body.parents,
        "joints": body.joints,
        "weights": body.weights,
    }
    write_container(path, BODY_MAGIC, BODY_VERSION, {"name": body.name}, arrays)


def load_body(path) -> ParametricBody:
    meta, arrays = read_container(path, BODY_MAGIC, BODY_VERSION)
    try:
        return ParametricBody(
            template=arrays["template"],
            faces=arrays["faces"],
            shape_basis=arrays["shape_basis"],
            parents=arrays["parents"],
            joints=arrays["joints"],
            weights=arrays["weights"],
            name=meta.get("name", "body"),
        )
    except KeyError as e:
        raise BodyModelError(f"body file is missing array {e}") from e
