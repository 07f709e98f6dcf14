"""Transistor-level simulation and soft-error evaluation of the OSC element and the LOCO latch."""

__version__ = "0.1.0"
