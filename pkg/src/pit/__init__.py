"""Mask-based architecture search for temporal convolutional networks."""

__version__ = "0.1.0"
