"""Retrieval-augmented visual context selection for ultra-high-resolution imagery."""

from .config import PipelineConfig
from .imaging import Box, DivisionMethod, ImageRef, PatchSpec, load_image
from .fast_path import VisualCue
from .pipeline import Pipeline

__version__ = "0.1.0"

__all__ = [
    "Box",
    "DivisionMethod",
    "ImageRef",
    "PatchSpec",
    "PipelineConfig",
    "Pipeline",
    "VisualCue",
    "load_image",
    "__version__",
]
