"""Behavior-aware dual-channel preference learning for heterogeneous
sequential recommendation."""

__version__ = "0.1.0"
