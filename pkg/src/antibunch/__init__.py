"""Simulation, correlation and fitting toolkit for photon antibunching
measurements on a resonantly driven two-level emitter."""

__version__ = "0.1.0"
