"""Depth-aware image-based radiance fields with depth-guided ray sampling."""

__version__ = "0.1.0"
