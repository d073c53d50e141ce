"""Expanded mixed multiscale finite elements for Darcy flow."""

__version__ = "0.1.0"
