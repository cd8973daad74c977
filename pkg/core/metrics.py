"""
Evaluation of a deformed garment against its guide.
Untextured renders around a 36-view ring, embedding similarity to the guidance
image, silhouette IoU, surface Chamfer and mesh quality.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import CAMERA_FOV_DEG, EVAL_VIEWS, MAX_WORKERS, METRIC_RESOLUTION
from core.camera import sample_cameras
from core.embeddings import EmbeddingProvider, cosine_similarity
from core.errors import ProviderError
from core.losses import parallel_map, surface_chamfer
from core.mesh import MeshQualityReport, TriMesh, quality_report
from core.rasterizer import render, shade_normals, to_uint8

logger = logging.getLogger(__name__)


@dataclass
class ViewScore:
    view: int
    azimuth: float
    clip_sim: float
    silhouette_iou: float

    def to_dict(self) -> dict:
        return {"view": self.view, "azimuth": self.azimuth,
                "clip_sim": self.clip_sim, "silhouette_iou": self.silhouette_iou}


@dataclass
class EvalReport:
    clip_sim: float
    silhouette_iou: float
    chamfer_to_guide: float
    quality: MeshQualityReport
    per_view: List[ViewScore] = field(default_factory=list)
    provider_id: str = ""

    def to_dict(self) -> dict:
        return {
            "clip_sim": self.clip_sim,
            "silhouette_iou": self.silhouette_iou,
            "chamfer_to_guide": self.chamfer_to_guide,
            "quality": self.quality.to_dict(),
            "provider": self.provider_id,
            "views": [row.to_dict() for row in self.per_view],
        }


def silhouette_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks agree perfectly."""
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)


def evaluate(def_mesh: TriMesh, guide_mesh: TriMesh, guidance_image: np.ndarray,
             provider: EmbeddingProvider, views: int = EVAL_VIEWS, resolution=METRIC_RESOLUTION,
             fov: float = CAMERA_FOV_DEG, workers: int = MAX_WORKERS,
             dump_dir: Optional[Path] = None) -> EvalReport:
    """
    Score def_mesh on a ring of `views` cameras (azimuth steps of 360/views,
    elevation 0) framed on the guide. Both meshes must already be aligned.
    """
    cameras = sample_cameras(0, views, guide_mesh, stratified=True, resolution=tuple(resolution), fov=fov)
    target = provider.embed(guidance_image).values

    def score(item):
        index, camera = item
        ours = render(def_mesh, camera, 0.0)
        theirs = render(guide_mesh, camera, 0.0)
        image = shade_normals(ours)
        try:
            embedding = provider.embed(image).values
        except ProviderError as e:
            raise e.for_view(index) from e
        row = ViewScore(
            view=index,
            azimuth=360.0 * index / views,
            clip_sim=cosine_similarity(embedding, target),
            silhouette_iou=silhouette_iou(ours.mask, theirs.mask),
        )
        return row, image

    results = parallel_map(score, list(enumerate(cameras)), workers)
    per_view = [row for row, _ in results]

    if dump_dir is not None:
        from PIL import Image

        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for row, image in results:
            Image.fromarray(to_uint8(image)).save(dump_dir / f"view_{row.view:02d}.png")

    chamfer, _, _ = surface_chamfer(def_mesh.vertices, guide_mesh)
    report = EvalReport(
        clip_sim=float(np.mean([r.clip_sim for r in per_view])),
        silhouette_iou=float(np.mean([r.silhouette_iou for r in per_view])),
        chamfer_to_guide=chamfer,
        quality=quality_report(def_mesh),
        per_view=per_view,
        provider_id=provider.provider_id,
    )
    logger.info("Evaluation over %d views: clip_sim=%.4f iou=%.4f chamfer=%.3g",
                views, report.clip_sim, report.silhouette_iou, report.chamfer_to_guide)
    return report


def save_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
