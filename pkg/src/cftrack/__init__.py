"""Lightweight Siamese tracker with contrastive feature matching."""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
