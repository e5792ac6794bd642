"""Laplace eigenvalues of measures on triangulated surfaces."""

__version__ = "0.1.0"
