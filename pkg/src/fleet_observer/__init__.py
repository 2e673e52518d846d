"""Distributed tracking of human-driven vehicles by a network of connected autonomous vehicles,
with local residual-based fault detection."""

__version__ = "0.1.0"
