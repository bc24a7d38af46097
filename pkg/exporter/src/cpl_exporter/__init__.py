"""Bridge real image classifiers into the conformal toolkit's CPL1 format."""

from .export import ExportError, ExportSpec, export, resolve_dataset, resolve_model
from .writer import write_cpl1

__version__ = "0.1.0"
