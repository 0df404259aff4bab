"""Synthetic shallow depth-of-field rendering from dual-pixel data."""
__version__ = "0.1.0"
