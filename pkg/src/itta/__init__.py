"""Desk-scale image-tag-text alignment on a synthetic concept world."""

__version__ = "0.1.0"
