"""Differentiable compositional query machine over temporal key-value memories."""

__version__ = "0.1.0"
