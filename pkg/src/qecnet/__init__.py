"""Rotation-equivariant capsule networks on quaternion frames for 3D point clouds."""

__version__ = "0.1.0"
