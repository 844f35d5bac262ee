"""Desk-scale unified understanding+generation model on a synthetic shapes world."""

__version__ = "0.1.0"
