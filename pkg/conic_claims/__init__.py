"""Conic claims - exact analysis of markets with proportional transaction costs."""

__version__ = "1.0.0"
