"""Transformer-generator GANs for binary image segmentation, on a numpy autograd core."""

__version__ = "0.1.0"
