"""Trotterized annealing of 3D PEPS with deterministic and Monte Carlo energy evaluation."""

__version__ = "0.1.0"
