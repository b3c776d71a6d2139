"""Regularized dipole sums over oriented point clouds, with Barnes-Hut
queries, differentiable volume rendering and reconstruction."""

__version__ = "0.1.0"
