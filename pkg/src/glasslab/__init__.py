"""Numerical laboratory for local independence in mean-field spin glasses."""

__version__ = "0.1.0"
