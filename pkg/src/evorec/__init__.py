"""Stage-wise evolving-interest news recommendation."""

__version__ = "0.1.0"
