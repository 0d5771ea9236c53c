"""Cascade stability of synchronized load balancing with sleep-mode cells."""

__version__ = "0.1.0"
