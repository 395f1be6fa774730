"""Adaptive FEM refinement with exactly constructed ReLU recurrent networks."""

__version__ = "0.1.0"
