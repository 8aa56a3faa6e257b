"""Mutual-information shaping of normal Jacobians for neural SDF reconstruction."""

__version__ = "0.1.0"
