"""Pedestrian trajectory prediction with social-force features."""

__version__ = "0.1.0"
