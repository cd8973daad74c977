"""
End-to-end garment pipeline.
Orchestrates: align → deform → evaluate → texture → fit, with files as stage
boundaries and a hash manifest so finished stages are reused on rerun.
"""

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import (
    DEPTH_TOLERANCE_FACTOR,
    EMBED_CACHE_DIR,
    EMBED_ENDPOINT,
    EMBED_ENDPOINT_ENV,
    EVAL_VIEWS,
    FACING_THRESHOLD,
    METRIC_RESOLUTION,
    OUTPUT_DIR,
    PROVIDER,
    SEED,
    TEXEL_CACHE_DIR,
    TEXTURE_DILATION,
    TEXTURE_SIZE,
)
from core.body import FitConfig, fit_body_to_garment, load_body
from core.cache import ArrayCache
from core.camera import load_camera_file
from core.embeddings import EmbeddingProvider, get_embedding_provider
from core.errors import ConfigValidationError, Garment3DError, StageError
from core.mesh import TriMesh, denormalize, load_obj, normalize_to_unit, save_obj
from core.metrics import evaluate, save_report
from core.optimizer import OptConfig, deform, guide_alignment, load_checkpoint
from core.texture import load_image, load_views, save_texture, texture_from_views

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
CAMERA_FILE = "cameras.json"

STAGES = ("align", "deform", "evaluate", "texture", "fit")
DEPENDENCIES = {
    "align": (),
    "deform": ("align",),
    "evaluate": ("align", "deform"),
    "texture": ("align", "deform"),
    "fit": ("align", "deform"),
}


# ── Configuration ─────────────────────────────────────────────────────────

@dataclass
class TextureOptions:
    size: int = TEXTURE_SIZE
    dilation: int = TEXTURE_DILATION
    depth_tolerance_factor: float = DEPTH_TOLERANCE_FACTOR
    facing_threshold: float = FACING_THRESHOLD

    def __post_init__(self):
        if self.size < 1 or self.dilation < 0:
            raise ConfigValidationError("texture size must be >= 1 and dilation >= 0")


@dataclass
class EvalOptions:
    views: int = EVAL_VIEWS
    resolution: Tuple[int, int] = METRIC_RESOLUTION
    dump_renders: bool = False

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.views < 1:
            raise ConfigValidationError(f"evaluation views must be >= 1, got {self.views}")


def _dataclass_from(cls, data: Optional[dict], section: str):
    data = dict(data or {})
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigValidationError(f"unknown {section} settings: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigValidationError(f"invalid {section} settings: {e}") from e


def _as_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    out = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


@dataclass
class PipelineConfig:
    base_mesh: Path
    guide_mesh: Path
    guidance_image: Path
    output_dir: Path = OUTPUT_DIR
    body_file: Optional[Path] = None
    views_dir: Optional[Path] = None
    seed: int = SEED
    provider: str = PROVIDER
    endpoint: str = EMBED_ENDPOINT
    yaw_search: bool = True
    optimizer: OptConfig = field(default_factory=OptConfig)
    texture: TextureOptions = field(default_factory=TextureOptions)
    fit: FitConfig = field(default_factory=FitConfig)
    evaluation: EvalOptions = field(default_factory=EvalOptions)

    def __post_init__(self):
        for name in ("base_mesh", "guide_mesh", "guidance_image", "output_dir", "body_file", "views_dir"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, Path(value))
        # one seed drives every stochastic stage
        self.optimizer.seed = self.seed
        self.fit.seed = self.seed

    def validate(self) -> None:
        """All referenced inputs must exist before any stage runs."""
        missing = [
            f"{name}: {getattr(self, name)}"
            for name in ("base_mesh", "guide_mesh", "guidance_image")
            if not getattr(self, name).is_file()
        ]
        if self.body_file is not None and not self.body_file.is_file():
            missing.append(f"body_file: {self.body_file}")
        if self.views_dir is not None and not (self.views_dir / CAMERA_FILE).is_file():
            missing.append(f"views_dir: {self.views_dir / CAMERA_FILE}")
        if missing:
            raise ConfigValidationError("missing input file(s): " + "; ".join(missing))
        if self.provider not in ("stub", "remote"):
            raise ConfigValidationError(f"Unknown embedding provider: {self.provider}. Available: ['stub', 'remote']")

    def to_dict(self) -> dict:
        return {
            "base_mesh": str(self.base_mesh),
            "guide_mesh": str(self.guide_mesh),
            "guidance_image": str(self.guidance_image),
            "output_dir": str(self.output_dir),
            "body_file": str(self.body_file) if self.body_file else None,
            "views_dir": str(self.views_dir) if self.views_dir else None,
            "seed": self.seed,
            "provider": self.provider,
            "endpoint": self.endpoint,
            "yaw_search": self.yaw_search,
            "optimizer": self.optimizer.to_dict(),
            "texture": _as_dict(self.texture),
            "fit": self.fit.to_dict(),
            "evaluation": _as_dict(self.evaluation),
        }


_PATH_KEYS = ("base_mesh", "guide_mesh", "guidance_image", "output_dir", "body_file", "views_dir")
_TOP_KEYS = set(_PATH_KEYS) | {"seed", "provider", "endpoint", "yaw_search", "optimizer", "weights",
                               "texture", "fit", "evaluation"}


def config_from_dict(data: dict, base_dir: Optional[Path] = None, seed: Optional[int] = None,
                     provider: Optional[str] = None, endpoint: Optional[str] = None) -> PipelineConfig:
    """
    Build a PipelineConfig from parsed JSON. Relative paths resolve against
    base_dir; explicit arguments override the JSON, and the endpoint
    environment variable overrides the JSON endpoint.
    """
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigValidationError(f"unknown config keys: {sorted(unknown)}")
    for key in ("base_mesh", "guide_mesh", "guidance_image"):
        if not data.get(key):
            raise ConfigValidationError(f"config is missing '{key}'")

    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    paths = {}
    for key in _PATH_KEYS:
        value = data.get(key)
        if value is not None:
            p = Path(value)
            paths[key] = p if p.is_absolute() else base_dir / p

    optimizer = dict(data.get("optimizer") or {})
    if "weights" in data:
        optimizer["weights"] = data["weights"]

    return PipelineConfig(
        **paths,
        seed=int(seed if seed is not None else data.get("seed", SEED)),
        provider=provider or data.get("provider", PROVIDER),
        endpoint=endpoint or os.environ.get(EMBED_ENDPOINT_ENV) or data.get("endpoint") or EMBED_ENDPOINT,
        yaw_search=bool(data.get("yaw_search", True)),
        optimizer=_dataclass_from(OptConfig, optimizer, "optimizer"),
        texture=_dataclass_from(TextureOptions, data.get("texture"), "texture"),
        fit=_dataclass_from(FitConfig, data.get("fit"), "fit"),
        evaluation=_dataclass_from(EvalOptions, data.get("evaluation"), "evaluation"),
    )


def load_pipeline_config(path, **overrides) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigValidationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"{path.name}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{path.name}: top level must be an object")
    return config_from_dict(data, base_dir=path.parent, **overrides)


# ── Manifest ──────────────────────────────────────────────────────────────

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def settings_hash(settings: dict) -> str:
    return hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode("utf-8")).hexdigest()


@dataclass
class StageRecord:
    stage: str
    status: str                         # done | cached | skipped | failed | running
    inputs: Dict[str, str] = field(default_factory=dict)
    settings: str = ""
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "inputs": self.inputs,
            "settings": self.settings,
            "outputs": self.outputs,
            "wall_time": self.wall_time,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, stage: str, data: dict) -> "StageRecord":
        return cls(stage=stage, status=data.get("status", ""), inputs=data.get("inputs", {}),
                   settings=data.get("settings", ""), outputs=data.get("outputs", {}),
                   wall_time=float(data.get("wall_time", 0.0)), error=data.get("error", ""))


class Manifest:
    """Per-stage input/settings/output hashes, rewritten after every stage."""

    def __init__(self, output_dir: Path):
        self.path = Path(output_dir) / MANIFEST_NAME
        self.stages: Dict[str, StageRecord] = {}
        self.completed: List[str] = []
        if self.path.is_file():
            try:
                data = json.loads(self.path.read_text(encoding="utf-8"))
                if data.get("version") == MANIFEST_VERSION:
                    self.stages = {k: StageRecord.from_dict(k, v) for k, v in data.get("stages", {}).items()}
            except (OSError, ValueError) as e:
                logger.warning("Ignoring unreadable manifest %s: %s", self.path, e)

    def previous(self, stage: str) -> Optional[StageRecord]:
        return self.stages.get(stage)

    def record(self, rec: StageRecord) -> None:
        self.stages[rec.stage] = rec
        if rec.status in ("done", "cached", "skipped") and rec.stage not in self.completed:
            self.completed.append(rec.stage)
        self.save()

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": MANIFEST_VERSION,
            "completed": self.completed,
            "stages": {k: v.to_dict() for k, v in self.stages.items()},
        }
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        tmp.replace(self.path)

    def output_hashes(self) -> Dict[str, Dict[str, str]]:
        return {k: dict(v.outputs) for k, v in self.stages.items()}


# ── Pipeline ──────────────────────────────────────────────────────────────

@dataclass
class PipelineResult:
    manifest: Manifest
    records: Dict[str, StageRecord]

    @property
    def statuses(self) -> Dict[str, str]:
        return {k: v.status for k, v in self.records.items()}


class GarmentPipeline:
    """
    Runs the stages in order; each stage reads files written by earlier ones.

    Usage:
        pipeline = GarmentPipeline(load_pipeline_config("run.json"))
        result = pipeline.run()
    """

    def __init__(self, config: PipelineConfig, provider: Optional[EmbeddingProvider] = None):
        self.config = config
        self.out = Path(config.output_dir)
        self._provider = provider

    # ── Helpers ──────────────────────────────────────────────────────────

    def path(self, stage: str, name: str) -> Path:
        return self.out / stage / name

    @property
    def provider(self) -> EmbeddingProvider:
        if self._provider is None:
            if self.config.provider == "remote":
                self._provider = get_embedding_provider(
                    "remote", endpoint=self.config.endpoint, cache=ArrayCache(EMBED_CACHE_DIR)
                )
            else:
                self._provider = get_embedding_provider("stub")
        return self._provider

    def _normalized(self) -> Tuple[TriMesh, TriMesh, float, np.ndarray]:
        """Base and aligned guide in the base's unit-sphere frame."""
        base = load_obj(self.config.base_mesh, name="base")
        guide = load_obj(self.path("align", "guide_aligned.obj"), name="guide")
        base_n, scale, translation = normalize_to_unit(base)
        guide_n = guide.with_vertices((guide.vertices + translation) * scale)
        return base_n, guide_n, scale, translation

    # ── Stage definitions ────────────────────────────────────────────────

    def _stage_inputs(self, stage: str) -> Dict[str, Path]:
        c = self.config
        inputs = {
            "align": {"base_mesh": c.base_mesh, "guide_mesh": c.guide_mesh},
            "deform": {"base_mesh": c.base_mesh, "guide_aligned": self.path("align", "guide_aligned.obj")},
            "evaluate": {"base_mesh": c.base_mesh, "guide_aligned": self.path("align", "guide_aligned.obj"),
                         "deformed": self.path("deform", "deformed.obj"), "guidance_image": c.guidance_image},
            "texture": {"deformed": self.path("deform", "deformed.obj")},
            "fit": {"deformed": self.path("deform", "deformed.obj")},
        }[stage]
        if stage == "texture" and c.views_dir is not None:
            inputs["cameras"] = c.views_dir / CAMERA_FILE
            for view in load_camera_file(inputs["cameras"]):
                inputs[f"view:{view['tag']}"] = c.views_dir / view["image"]
        if stage == "fit" and c.body_file is not None:
            inputs["body"] = c.body_file
        return inputs

    def _stage_settings(self, stage: str) -> dict:
        c = self.config
        return {
            "align": lambda: {"yaw_search": c.yaw_search},
            "deform": lambda: {"optimizer": c.optimizer.to_dict(),
                               "provider": self.provider.provider_id if c.optimizer.weights.w_e > 0 else None},
            "evaluate": lambda: {"evaluation": _as_dict(c.evaluation), "provider": self.provider.provider_id},
            "texture": lambda: {"texture": _as_dict(c.texture)},
            "fit": lambda: {"fit": c.fit.to_dict()},
        }[stage]()

    def _skip_reason(self, stage: str) -> Optional[str]:
        if stage == "texture" and self.config.views_dir is None:
            return "no views_dir configured"
        if stage == "fit" and self.config.body_file is None:
            return "no body_file configured"
        return None

    def _run_align(self) -> Dict[str, Path]:
        base = load_obj(self.config.base_mesh, name="base")
        guide = load_obj(self.config.guide_mesh, name="guide")
        alignment = guide_alignment(base, guide, self.config.yaw_search)
        aligned = guide.with_vertices(alignment.apply(guide.vertices), name="guide_aligned")
        out = {"guide_aligned": self.path("align", "guide_aligned.obj"),
               "alignment": self.path("align", "alignment.json")}
        save_obj(aligned, out["guide_aligned"])
        out["alignment"].write_text(json.dumps(alignment.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return out

    def _run_deform(self, resume: bool) -> Dict[str, Path]:
        base_n, guide_n, scale, translation = self._normalized()
        out = {"deformed": self.path("deform", "deformed.obj"),
               "checkpoint": self.path("deform", "checkpoint.g3dg"),
               "loss_log": self.path("deform", "loss.csv")}
        state = None
        if resume and out["checkpoint"].is_file():
            state = load_checkpoint(out["checkpoint"])
            logger.info("Resuming deformation from iteration %d", state.iteration)
        provider = self.provider if self.config.optimizer.weights.w_e > 0 else None
        result = deform(base_n, guide_n, self.config.optimizer, provider, state=state,
                        checkpoint_path=out["checkpoint"], log_path=out["loss_log"])
        save_obj(denormalize(result.mesh, scale, translation), out["deformed"])
        return out

    def _run_evaluate(self) -> Dict[str, Path]:
        _, guide_n, scale, translation = self._normalized()
        deformed = load_obj(self.path("deform", "deformed.obj"), name="deformed")
        deformed_n = deformed.with_vertices((deformed.vertices + translation) * scale)
        ev = self.config.evaluation
        dump = self.path("evaluate", "renders") if ev.dump_renders else None
        report = evaluate(deformed_n, guide_n, load_image(self.config.guidance_image), self.provider,
                          views=ev.views, resolution=ev.resolution, dump_dir=dump)
        out = {"report": self.path("evaluate", "report.json")}
        save_report(report, out["report"])
        return out

    def _run_texture(self) -> Dict[str, Path]:
        deformed = load_obj(self.path("deform", "deformed.obj"), name="deformed")
        views = load_views(self.config.views_dir / CAMERA_FILE, self.config.views_dir)
        t = self.config.texture
        result = texture_from_views(
            deformed, views, texture_size=t.size, dilation=t.dilation,
            depth_tolerance=t.depth_tolerance_factor * deformed.bounding_radius(),
            facing_threshold=t.facing_threshold, cache=ArrayCache(TEXEL_CACHE_DIR),
        )
        written = save_texture(result, deformed, self.out / "texture", stem="garment")
        return {k: Path(v) for k, v in written.items()}

    def _run_fit(self) -> Dict[str, Path]:
        garment = load_obj(self.path("deform", "deformed.obj"), name="garment")
        body = load_body(self.config.body_file)
        result = fit_body_to_garment(body, garment, self.config.fit)
        out = {"params": self.path("fit", "fit_params.json"), "body": self.path("fit", "body_posed.obj")}
        out["params"].parent.mkdir(parents=True, exist_ok=True)
        out["params"].write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")
        save_obj(result.body_mesh, out["body"])
        return out

    # ── Driver ───────────────────────────────────────────────────────────

    def _reusable(self, prev: Optional[StageRecord], inputs: Dict[str, str], settings: str) -> bool:
        if prev is None or prev.status not in ("done", "cached"):
            return False
        if prev.inputs != inputs or prev.settings != settings or not prev.outputs:
            return False
        for name, digest in prev.outputs.items():
            p = self.out / name
            if not p.is_file() or file_hash(p) != digest:
                return False
        return True

    def run_stage(self, stage: str, manifest: Manifest) -> StageRecord:
        reason = self._skip_reason(stage)
        if reason:
            logger.warning("Skipping stage '%s': %s", stage, reason)
            rec = StageRecord(stage, "skipped", error=reason)
            manifest.record(rec)
            return rec

        try:
            inputs = {k: file_hash(p) for k, p in self._stage_inputs(stage).items()}
        except (OSError, ValueError, KeyError) as e:
            manifest.record(StageRecord(stage, "failed", error=f"unreadable input: {e}"))
            raise StageError(stage, e) from e
        settings = settings_hash(self._stage_settings(stage))
        prev = manifest.previous(stage)
        if self._reusable(prev, inputs, settings):
            logger.info("Stage '%s' unchanged; reusing outputs", stage)
            rec = StageRecord(stage, "cached", inputs, settings, dict(prev.outputs), prev.wall_time)
            manifest.record(rec)
            return rec

        resume = prev is not None and prev.status in ("running", "failed") and prev.inputs == inputs \
            and prev.settings == settings
        manifest.record(StageRecord(stage, "running", inputs, settings))
        runners: Dict[str, Callable[[], Dict[str, Path]]] = {
            "align": self._run_align,
            "deform": lambda: self._run_deform(resume),
            "evaluate": self._run_evaluate,
            "texture": self._run_texture,
            "fit": self._run_fit,
        }
        logger.info("Running stage '%s'", stage)
        start = time.perf_counter()
        try:
            written = runners[stage]()
        except (Garment3DError, OSError, ValueError) as e:
            manifest.record(StageRecord(stage, "failed", inputs, settings,
                                        wall_time=time.perf_counter() - start, error=str(e)))
            raise StageError(stage, e) from e

        outputs = {str(p.relative_to(self.out)): file_hash(p) for p in written.values()}
        rec = StageRecord(stage, "done", inputs, settings, outputs, time.perf_counter() - start)
        manifest.record(rec)
        logger.info("Stage '%s' done in %.1fs", stage, rec.wall_time)
        return rec

    def run(self, stage: Optional[str] = None) -> PipelineResult:
        """Run every stage, or only `stage` plus what it depends on."""
        if stage is not None and stage not in STAGES:
            raise ConfigValidationError(f"Unknown stage: {stage}. Available: {list(STAGES)}")
        self.config.validate()
        self.out.mkdir(parents=True, exist_ok=True)

        wanted = STAGES if stage is None else tuple(s for s in STAGES if s in DEPENDENCIES[stage] or s == stage)
        manifest = Manifest(self.out)
        records = {}
        for name in wanted:
            records[name] = self.run_stage(name, manifest)
        return PipelineResult(manifest=manifest, records=records)


def run_pipeline(config: PipelineConfig, stage: Optional[str] = None,
                 provider: Optional[EmbeddingProvider] = None) -> PipelineResult:
    return GarmentPipeline(config, provider).run(stage)
