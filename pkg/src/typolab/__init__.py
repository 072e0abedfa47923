"""Desk-scale laboratory for typo-robust dense retrieval."""

__version__ = "0.1.0"
