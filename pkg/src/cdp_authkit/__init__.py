"""Unsupervised copy-detection-pattern authentication from print estimations."""
__version__ = "0.1.0"
