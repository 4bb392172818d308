"""Modular language-expert mixtures distilled from a single teacher."""
__version__ = "0.1.0"
