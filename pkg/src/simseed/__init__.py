"""Simulation-ready synthetic populations and crop water-satisfaction grids."""

__version__ = "0.1.0"
