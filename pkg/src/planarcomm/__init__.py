"""Commutation-frame calibration, regulation and GP feedforward for planar motors."""

__version__ = "0.1.0"
