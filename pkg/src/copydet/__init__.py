"""Dual global/local retrieval for image copy detection."""

__version__ = "0.1.0"
