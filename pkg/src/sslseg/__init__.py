"""Pseudo-label self-training for semantic segmentation on a from-scratch numpy stack."""

__version__ = "0.1.0"
