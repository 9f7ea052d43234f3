"""Command-line pipeline, experiment configuration and reports."""

from .config import ExperimentConfig, parse_overrides

__all__ = ["ExperimentConfig", "parse_overrides"]
