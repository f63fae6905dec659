"""Curve clustering and segmentation with piecewise regression mixtures."""

__version__ = "0.1.0"
