"""Gradient-feature novelty detection pipeline."""

__version__ = "0.1.0"
