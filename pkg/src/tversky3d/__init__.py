"""Tversky-loss 3D U-net segmentation on small synthetic MRI-like volumes, in numpy."""

__version__ = "0.1.0"
