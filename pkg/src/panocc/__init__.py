"""Panoramic open-vocabulary voxel occupancy toolkit."""

__version__ = "0.1.0"
