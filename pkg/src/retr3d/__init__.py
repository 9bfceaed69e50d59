"""Voxel 3D reconstruction from images with transformers."""

from .voxgrid import VoxelField, VoxelGrid, iou, read_binvox, threshold, write_binvox

__version__ = "0.1.0"

__all__ = ["VoxelField", "VoxelGrid", "iou", "read_binvox", "threshold", "write_binvox"]
