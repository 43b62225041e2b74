"""Terrain-aware path planning on point clouds, with a Monte-Carlo evaluation harness."""

__version__ = "0.1.0"
