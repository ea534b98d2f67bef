"""Adaptive FEM/BEM coupling for the 2D Laplace transmission problem,
with the banded/Jaffard LU machinery used to certify quasi-orthogonality."""

__version__ = "0.1.0"
