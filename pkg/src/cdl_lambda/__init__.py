"""Convolutional sparse coding reconstruction with learned sparsity-level maps."""

__version__ = "0.1.0"
