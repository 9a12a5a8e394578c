"""Desk-scale toolkit for energy-based models trained by implicit generation."""

__version__ = "0.1.0"
