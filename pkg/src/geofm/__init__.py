"""Desk-scale geospatial foundation-model adaptation pipeline."""

__version__ = "0.1.0"
