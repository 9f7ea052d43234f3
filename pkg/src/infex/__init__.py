"""Informed exploration for pixel-observation RL at desk scale."""

__version__ = "0.1.0"
