"""Distributed particle and particle-mesh simulation framework."""
__version__ = "0.1.0"
