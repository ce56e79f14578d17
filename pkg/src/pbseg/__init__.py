"""Prototype-based mask-classification segmentation on a NumPy autodiff core."""

__version__ = "0.1.0"
