"""Weighted multi-region two-stream action recognition, built on a small numpy layer library."""

__version__ = "0.1.0"
