"""Mechanistic bias analysis on small transformer bundles."""

__version__ = "0.1.0"
