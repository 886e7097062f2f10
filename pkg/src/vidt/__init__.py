"""Desk-scale vision detection transformer on numpy."""

__version__ = "0.1.0"
