"""Photorealistic style transfer: dense-block U-Net with multi-layer feature aggregation."""

from umfa.tensor import Tape, Tensor, backward, precision

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "precision", "__version__"]
