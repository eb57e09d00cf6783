"""Piecewise-rigid multiframe scene flow from RGB-D sequences."""

__version__ = "0.1.0"
