"""Lightweight U-shaped segmentation network with linear-cost additive attention."""

__version__ = "0.1.0"
