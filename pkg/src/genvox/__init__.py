"""Generalizable neural voxels for articulated-body radiance fields."""

__version__ = "0.1.0"
