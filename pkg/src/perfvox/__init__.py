"""Supervoxel perfusion analytics for 3D CBF maps."""

__version__ = "0.1.0"
