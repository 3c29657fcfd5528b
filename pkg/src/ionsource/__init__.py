"""Simulation of a segmented Paul trap used as a deterministic ion source."""

__version__ = "0.1.0"
