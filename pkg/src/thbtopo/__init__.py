"""Adaptive level-set topology optimisation with truncated hierarchical B-splines and XFEM."""

__version__ = "0.1.0"
