"""Subgraph diffusion for molecular conformers."""

__version__ = "0.1.0"
