"""Polarization-state sensing toolkit."""

__version__ = "0.1.0"
