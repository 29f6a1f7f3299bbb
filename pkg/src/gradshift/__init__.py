"""Desk-scale laboratory for supervised gradual domain adaptation."""

__version__ = "0.1.0"
