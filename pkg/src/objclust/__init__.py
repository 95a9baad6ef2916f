"""Unsupervised object detection and clustering with a Gaussian-mixture appearance prior."""
__version__ = "0.1.0"
