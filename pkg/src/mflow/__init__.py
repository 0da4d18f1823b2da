"""Manifold continuous normalizing flows on the hyperboloid and the sphere."""

__version__ = "0.1.0"
