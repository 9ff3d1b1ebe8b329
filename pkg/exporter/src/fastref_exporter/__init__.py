"""Image-folder to FTZ feature-tensor exporter."""

from .export import ExportSpec, export_features
from .ftz import write_ftz

__version__ = "0.1.0"

__all__ = ["ExportSpec", "export_features", "write_ftz"]
