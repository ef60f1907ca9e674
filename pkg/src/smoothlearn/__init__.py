"""Factor-graph state estimation with end-to-end learned noise models."""

__version__ = "0.1.0"
