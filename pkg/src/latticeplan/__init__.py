"""Curved-layer lattice slicing and multi-axis print planning for tet meshes."""

__version__ = "0.1.0"
