"""Desk-scale adapter laboratory: style propagation, two-stage motion adapters, timestep shift."""

__version__ = "0.1.0"
