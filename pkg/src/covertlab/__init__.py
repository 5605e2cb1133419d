"""Covert timing channel simulation and detection."""

__version__ = "0.1.0"
