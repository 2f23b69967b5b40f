"""Fracture candidate detection along bone edges in CT-like volumes."""

__version__ = "0.1.0"
