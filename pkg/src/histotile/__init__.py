"""Patch-based breast histology classification pipeline."""

from histotile.dataset import ClassLabel

__version__ = "0.1.0"

__all__ = ["ClassLabel", "__version__"]
