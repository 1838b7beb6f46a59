"""Multivariate Bayesian segmentation of volumetric multichannel images."""

__version__ = "0.1.0"
