"""Batch export of frame-level speech embeddings to BEMB files."""

from bemb_export.models import MODEL_REGISTRY, ModelSpec, load_model
from bemb_export.cli import ExportJob, export, main
from bemb_export.writer import write_bemb

__all__ = [
    "ExportJob",
    "MODEL_REGISTRY",
    "ModelSpec",
    "export",
    "load_model",
    "main",
    "write_bemb",
]
