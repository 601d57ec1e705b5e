"""Anatomically guaranteed post-processing of cardiac label maps."""

__version__ = "0.1.0"
