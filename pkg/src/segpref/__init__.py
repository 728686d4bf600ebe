"""Preference-aligned prompt segmentation on a synthetic desk-scale corpus."""

__version__ = "0.1.0"
