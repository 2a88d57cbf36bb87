"""Distributional reinforcement learning by quantile regression."""

__version__ = "0.1.0"
