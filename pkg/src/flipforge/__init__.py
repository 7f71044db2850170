"""Modulus-controlled reflections of Cantor sets."""

__version__ = "0.1.0"
