"""Representation learning components for image-based imitation learning."""

__version__ = "0.1.0"
