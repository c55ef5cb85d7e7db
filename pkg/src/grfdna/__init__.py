"""Gaussian random field samplers on boxes: naive periodisation, circulant
embedding and Dirichlet-Neumann averaging, plus a finite-element SPDE variant."""

__version__ = "0.1.0"
