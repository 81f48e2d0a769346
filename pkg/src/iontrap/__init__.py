"""Simulation and control synthesis for multi-well surface ion traps."""

__version__ = "0.1.0"
