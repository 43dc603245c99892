"""Desk-scale model compression: prune, factorize, and fine-tune small MLPs."""

__version__ = "0.1.0"
