"""Probabilistic scene-aware prompt learning on synthetic monocular-detection data."""
from __future__ import annotations

from . import numerics  # noqa: F401  (sets float64 default dtype)
from .config import RunConfig

__all__ = ["RunConfig"]
__version__ = "0.1.0"
