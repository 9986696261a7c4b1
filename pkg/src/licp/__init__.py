"""Laplacian ICP: staged non-rigid template registration."""
__version__ = "0.1.0"
