"""Desk-scale 3D scene instruction tuning pipeline."""

__version__ = "0.1.0"
