"""Desk-scale laboratory for meta-learned three-factor low-rank adapters."""

__version__ = "0.1.0"
