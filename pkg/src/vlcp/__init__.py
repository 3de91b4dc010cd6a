"""Continual image-text pretraining on synthetic task streams."""

__version__ = "0.1.0"
