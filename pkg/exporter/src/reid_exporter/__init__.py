"""Backbone feature exporter emitting stripereid-compatible datasets."""

from .backbones import PROFILES, StubBackbone, TorchResNet50Backbone, get_backbone
from .errors import BackboneUnavailable, ExporterError, ImageDecodeError, LayoutError
from .export import ExportSpec, ExportResult, PRID_MIN_FRAMES, export, scan_layout

__version__ = "0.1.0"

__all__ = [
    "PROFILES",
    "PRID_MIN_FRAMES",
    "BackboneUnavailable",
    "ExportSpec",
    "ExportResult",
    "ExporterError",
    "ImageDecodeError",
    "LayoutError",
    "StubBackbone",
    "TorchResNet50Backbone",
    "export",
    "get_backbone",
    "scan_layout",
]
