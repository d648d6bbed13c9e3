"""Optical-flow guided features on a small numpy network."""

__version__ = "0.1.0"
