"""
Core package for garment deformation, body fitting and texturing.
"""

from core.pipeline import GarmentPipeline, run_pipeline

__all__ = ["GarmentPipeline", "run_pipeline"]
