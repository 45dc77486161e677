"""Colorization-based anomaly maps and layer-wise external attention on numpy."""

__version__ = "0.1.0"
