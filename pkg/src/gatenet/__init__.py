"""Gated encoder-decoder binary segmentation on a small float64 array engine."""

__version__ = "0.1.0"
