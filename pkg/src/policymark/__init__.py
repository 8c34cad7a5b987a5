"""Adaptive code watermarking over a miniature programming language."""

__version__ = "0.1.0"
