"""Dual-branch semi-supervised semantic segmentation with region-level
pseudo-label filtering, dynamic region loss weighting and ensembling inference."""

from .common import IGNORE_LABEL, ConfigurationError, NumericsError

__all__ = ["IGNORE_LABEL", "ConfigurationError", "NumericsError"]
__version__ = "0.1.0"
