"""Sparse-view cone-beam CT reconstruction toolkit."""

__version__ = "0.1.0"
