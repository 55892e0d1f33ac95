"""Differentiable architecture search with hard-concrete gates and path regularization."""

__version__ = "0.1.0"
