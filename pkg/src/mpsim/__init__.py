"""Plane-sweep multi-view depth estimation with learned n-way patch similarity."""

__version__ = "0.1.0"
