"""Normalizing-flow density models, policies, and RL training loops."""

__version__ = "0.1.0"
