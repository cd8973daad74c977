"""
Deformation optimizer.
Adam over the Jacobian field (plus a free global translation), seeded
per-iteration sampling, best-iterate tracking, early stopping, CSV loss log,
versioned binary checkpoints and guide pre-alignment.
"""

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config import (
    ADAM_BETAS,
    ADAM_EPS,
    CAMERAS_PER_ITER,
    CHAMFER_TARGET,
    CHECKPOINT_EVERY,
    EARLY_STOP_PATIENCE,
    ITERATIONS,
    LEARNING_RATE,
    LEARNING_RATE_MIN,
    LOG_EVERY,
    LOSS_RESOLUTION,
    MAX_WORKERS,
    RENDER_SOFTNESS,
    SEED,
    SHOW_PROGRESS,
    SURFACE_SAMPLES,
)
from core.container import read_container, write_container
from core.embeddings import EmbeddingProvider
from core.errors import (
    ConfigValidationError,
    CorruptCheckpointError,
    DivergenceError,
    NonFiniteLossError,
)
from core.jacobians import build_system, identity_jacobians
from core.losses import CHAMFER_TARGETS, LossBreakdown, LossContext, LossWeights, surface_chamfer, total_loss
from core.mesh import TriMesh
from core.primitives import rotation_y

logger = logging.getLogger(__name__)


# ── Configuration ─────────────────────────────────────────────────────────

@dataclass
class OptConfig:
    iterations: int = ITERATIONS
    learning_rate: float = LEARNING_RATE
    learning_rate_min: float = LEARNING_RATE_MIN
    adam_betas: Tuple[float, float] = ADAM_BETAS
    adam_eps: float = ADAM_EPS
    weights: LossWeights = field(default_factory=LossWeights)
    cameras_per_iter: int = CAMERAS_PER_ITER
    surface_samples: int = SURFACE_SAMPLES
    chamfer_target: str = CHAMFER_TARGET
    seed: int = SEED
    checkpoint_every: int = CHECKPOINT_EVERY
    early_stop_patience: int = EARLY_STOP_PATIENCE
    softness: float = RENDER_SOFTNESS
    resolution: Tuple[int, int] = LOSS_RESOLUTION
    workers: int = MAX_WORKERS
    log_every: int = LOG_EVERY
    show_progress: bool = SHOW_PROGRESS

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.iterations < 1:
            raise ConfigValidationError(f"iterations must be >= 1, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ConfigValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.learning_rate_min <= self.learning_rate:
            raise ConfigValidationError("learning_rate_min must be in (0, learning_rate]")
        if self.cameras_per_iter < 1:
            raise ConfigValidationError(f"cameras_per_iter must be >= 1, got {self.cameras_per_iter}")
        if self.surface_samples < 1:
            raise ConfigValidationError(f"surface_samples must be >= 1, got {self.surface_samples}")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ConfigValidationError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if self.softness < 0:
            raise ConfigValidationError(f"softness must be >= 0, got {self.softness}")
        if self.chamfer_target not in CHAMFER_TARGETS:
            raise ConfigValidationError(
                f"Unknown chamfer target: {self.chamfer_target}. Available: {list(CHAMFER_TARGETS)}"
            )

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["weights"] = self.weights.to_dict()
        out["adam_betas"] = list(self.adam_betas)
        out["resolution"] = list(self.resolution)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigValidationError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(**data)


# ── Adam ──────────────────────────────────────────────────────────────────

class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, lr: float = LEARNING_RATE, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = lr / bc1

        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[k] * (1.0 / bc2)) + self.epsilon
            params[k] -= step_size * self.m[k] / denom


def cosine_lr(iteration: int, total: int, lr: float, lr_min: float) -> float:
    """Cosine decay from lr at iteration 0 to lr_min at the last iteration."""
    if total <= 1:
        return lr
    progress = min(iteration / (total - 1), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + np.cos(np.pi * progress))


# ── State ─────────────────────────────────────────────────────────────────

@dataclass
class OptState:
    iteration: int
    jacobians: np.ndarray
    translation: np.ndarray
    adam: Adam
    best_loss: float = float("inf")
    best_jacobians: Optional[np.ndarray] = None
    best_translation: Optional[np.ndarray] = None
    best_iteration: int = -1
    stale: int = 0
    seed: int = SEED
    history: List[LossBreakdown] = field(default_factory=list)

    @classmethod
    def initial(cls, face_count: int, config: OptConfig) -> "OptState":
        return cls(
            iteration=0,
            jacobians=identity_jacobians(face_count),
            translation=np.zeros(3),
            adam=Adam(config.learning_rate, config.adam_betas[0], config.adam_betas[1], config.adam_eps),
            seed=config.seed,
        )

    def params(self) -> Dict[str, np.ndarray]:
        return {"jacobians": self.jacobians, "translation": self.translation}


# ── Checkpoints ───────────────────────────────────────────────────────────
# Stored in the binary array container (see core/container.py) under magic
# "G3DG"; integer counters go in the header, everything else as f8 arrays.

CHECKPOINT_MAGIC = b"G3DG"
CHECKPOINT_VERSION = 1


def _state_arrays(state: OptState) -> Dict[str, np.ndarray]:
    m, v = state.adam.m, state.adam.v
    zeros_j = np.zeros_like(state.jacobians)
    return {
        "jacobians": state.jacobians,
        "translation": state.translation,
        "adam_m_jacobians": m.get("jacobians", zeros_j),
        "adam_v_jacobians": v.get("jacobians", zeros_j),
        "adam_m_translation": m.get("translation", np.zeros(3)),
        "adam_v_translation": v.get("translation", np.zeros(3)),
        "best_jacobians": state.best_jacobians if state.best_jacobians is not None else state.jacobians,
        "best_translation": state.best_translation if state.best_translation is not None else state.translation,
        "best_loss": np.array([state.best_loss]),
        "adam_hparams": np.array([state.adam.lr, state.adam.beta1, state.adam.beta2, state.adam.epsilon]),
        "history": np.array([[getattr(b, k) for k in LossBreakdown.CSV_HEADER[1:]] for b in state.history]).reshape(-1, 6),
    }


def save_checkpoint(state: OptState, path) -> None:
    meta = {
        "iteration": state.iteration,
        "adam_t": state.adam.t,
        "best_iteration": state.best_iteration,
        "stale": state.stale,
        "seed": state.seed,
    }
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, _state_arrays(state))


def load_checkpoint(path) -> OptState:
    meta, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        lr, beta1, beta2, eps = arrays["adam_hparams"]
        adam = Adam(float(lr), float(beta1), float(beta2), float(eps))
        adam.t = int(meta["adam_t"])
        if adam.t > 0:
            adam.m = {"jacobians": arrays["adam_m_jacobians"], "translation": arrays["adam_m_translation"]}
            adam.v = {"jacobians": arrays["adam_v_jacobians"], "translation": arrays["adam_v_translation"]}
        best_it = int(meta["best_iteration"])
        return OptState(
            iteration=int(meta["iteration"]),
            jacobians=arrays["jacobians"],
            translation=arrays["translation"],
            adam=adam,
            best_loss=float(arrays["best_loss"][0]),
            best_jacobians=arrays["best_jacobians"] if best_it >= 0 else None,
            best_translation=arrays["best_translation"] if best_it >= 0 else None,
            best_iteration=best_it,
            stale=int(meta["stale"]),
            seed=int(meta["seed"]),
            history=[LossBreakdown(*(float(x) for x in row)) for row in arrays["history"]],
        )
    except (KeyError, ValueError, TypeError) as e:
        raise CorruptCheckpointError(f"{Path(path).name}: missing or malformed checkpoint field ({e})") from e


# ── Loss log ──────────────────────────────────────────────────────────────

class LossLog:
    """CSV of per-iteration breakdowns; appends when resuming."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (resume and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(LossBreakdown.CSV_HEADER)

    def write(self, iteration: int, breakdown: LossBreakdown) -> None:
        self._writer.writerow(breakdown.to_row(iteration))

    def close(self) -> None:
        self._fh.close()


# ── Alignment ─────────────────────────────────────────────────────────────

@dataclass
class GuideAlignment:
    scale: float
    yaw_degrees: float
    source_center: np.ndarray
    target_center: np.ndarray
    candidate_scores: Dict[float, float] = field(default_factory=dict)

    def apply(self, points: np.ndarray) -> np.ndarray:
        R = rotation_y(self.yaw_degrees)
        return (self.scale * (np.asarray(points) - self.source_center)) @ R.T + self.target_center

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "yaw_degrees": self.yaw_degrees,
            "source_center": self.source_center.tolist(),
            "target_center": self.target_center.tolist(),
            "candidate_scores": {str(k): v for k, v in self.candidate_scores.items()},
        }


def guide_alignment(base: TriMesh, guide: TriMesh, yaw_search: bool = True) -> GuideAlignment:
    """
    Similarity transform putting the guide's centroid on the base's and matching
    bounding-sphere radii; optionally the best of four yaw candidates by
    base-to-guide surface Chamfer (ties go to the smaller angle).
    """
    c_base, c_guide = base.centroid(), guide.centroid()
    r_base, r_guide = base.bounding_radius(c_base), guide.bounding_radius(c_guide)
    scale = r_base / r_guide if r_guide > 0 else 1.0
    alignment = GuideAlignment(scale=scale, yaw_degrees=0.0, source_center=c_guide, target_center=c_base)
    if not yaw_search:
        return alignment

    best = None
    for yaw in (0.0, 90.0, 180.0, 270.0):
        candidate = GuideAlignment(scale, yaw, c_guide, c_base)
        moved = guide.with_vertices(candidate.apply(guide.vertices))
        score, _, _ = surface_chamfer(base.vertices, moved)
        alignment.candidate_scores[yaw] = score
        if best is None or score < best[0]:
            best = (score, yaw)
    alignment.yaw_degrees = best[1]
    logger.info("Guide alignment: scale=%.6g yaw=%g", scale, alignment.yaw_degrees)
    return alignment


def align_guide(base: TriMesh, guide: TriMesh, yaw_search: bool = True) -> TriMesh:
    alignment = guide_alignment(base, guide, yaw_search)
    return guide.with_vertices(alignment.apply(guide.vertices), name=f"{guide.name}_aligned")


# ── Main loop ─────────────────────────────────────────────────────────────

@dataclass
class DeformResult:
    mesh: TriMesh
    state: OptState
    history: List[LossBreakdown]
    final_chamfer: float


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Cameras and samples of one iteration depend only on (seed, iteration)."""
    return np.random.default_rng([seed, iteration])


def build_context(base: TriMesh, guide: TriMesh, config: OptConfig,
                  provider: Optional[EmbeddingProvider] = None) -> LossContext:
    op, system = build_system(base)
    return LossContext(
        rest=base,
        op=op,
        system=system,
        guide=guide,
        weights=config.weights,
        provider=provider,
        softness=config.softness,
        resolution=config.resolution,
        cameras_per_iter=config.cameras_per_iter,
        surface_samples=config.surface_samples,
        workers=config.workers,
        chamfer_target=config.chamfer_target,
    )


def deform(
    base: TriMesh,
    guide: TriMesh,
    config: Optional[OptConfig] = None,
    provider: Optional[EmbeddingProvider] = None,
    state: Optional[OptState] = None,
    checkpoint_path=None,
    log_path=None,
    stop_at: Optional[int] = None,
    context: Optional[LossContext] = None,
) -> DeformResult:
    """
    Optimize the Jacobian field so the deformed base matches the guide.
    Returns the best-loss iterate; connectivity is that of `base`.
    Pass `state` (e.g. from load_checkpoint) to resume; `stop_at` halts early
    at that iteration without changing the schedule.
    """
    config = config or OptConfig()
    ctx = context or build_context(base, guide, config, provider)
    if state is None:
        state = OptState.initial(base.face_count, config)
    elif state.jacobians.shape != (base.face_count, 3, 3):
        raise CorruptCheckpointError(
            f"checkpoint holds {len(state.jacobians)} faces, base mesh has {base.face_count}"
        )

    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    log = LossLog(log_path, resume=state.iteration > 0) if log_path else None
    progress = tqdm(
        total=end, initial=state.iteration, desc="deform", unit="it",
        disable=not config.show_progress, leave=False,
    )
    logger.info("Deforming '%s' (%d faces) toward '%s' for %d iterations",
                base.name, base.face_count, guide.name, config.iterations)

    try:
        while state.iteration < end:
            t = state.iteration
            rng = iteration_rng(state.seed, t)
            vertices = ctx.positions(state.jacobians, state.translation)
            batch = ctx.draw_batch(base.with_vertices(vertices), rng)
            try:
                result = total_loss(ctx, state.jacobians, state.translation, batch, vertices=vertices)
            except NonFiniteLossError as e:
                raise DivergenceError(t, e.term, e.value) from e

            br = result.breakdown
            state.history.append(br)
            if log:
                log.write(t, br)

            if br.total < state.best_loss:
                state.best_loss = br.total
                state.best_jacobians = state.jacobians.copy()
                state.best_translation = state.translation.copy()
                state.best_iteration = t
                state.stale = 0
            else:
                state.stale += 1

            lr = cosine_lr(t, config.iterations, config.learning_rate, config.learning_rate_min)
            state.adam.step(state.params(), {"jacobians": result.d_jacobians, "translation": result.d_translation}, lr=lr)
            if not np.all(np.isfinite(state.jacobians)):
                raise DivergenceError(t, "jacobians", float("nan"))
            state.iteration += 1
            progress.update(1)

            if config.log_every and (t % config.log_every == 0 or state.iteration == end):
                logger.info(
                    "iter %d: total=%.6g cd=%.6g lap=%.6g triag=%.6g 2d=%.6g embed=%.6g lr=%.3g",
                    t, br.total, br.cd, br.lap, br.triag, br.render2d, br.embed, lr,
                )
            if checkpoint_path and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
            if config.early_stop_patience and state.stale >= config.early_stop_patience:
                logger.info("Early stop at iteration %d (best %d, loss %.6g)",
                            t, state.best_iteration, state.best_loss)
                break
    finally:
        progress.close()
        if log:
            log.close()

    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)

    best_j = state.best_jacobians if state.best_jacobians is not None else state.jacobians
    best_t = state.best_translation if state.best_translation is not None else state.translation
    mesh = ctx.deformed(best_j, best_t)
    mesh = TriMesh(mesh.vertices, base.faces, uvs=base.uvs, uv_faces=base.uv_faces, name=f"{base.name}_deformed")
    final, _, _ = surface_chamfer(mesh.vertices, guide)
    logger.info("Deformation done: best iteration %d, final Chamfer %.3g", state.best_iteration, final)
    return DeformResult(mesh=mesh, state=state, history=list(state.history), final_chamfer=final)
