"""Disentangled graph neural network for session-based next-item recommendation."""

__version__ = "0.1.0"
