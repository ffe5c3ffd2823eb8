"""Desk-scale magnetostatics: dipole assemblies, field lines, ferrofluid sensor
response and log-spiral analysis."""

__version__ = "0.1.0"
