"""Finite-step small-gain certification of ISS for interconnected discrete-time systems."""

__version__ = "0.1.0"
