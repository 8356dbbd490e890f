"""Compact unpaired two-modality segmentation workbench.

Shared convolution kernels across modalities, per-modality internal
feature normalization, and a symmetric-KL alignment loss on distilled
per-class prediction distributions.
"""
from .estimator import CrossModalSegmenter
from .tensor import Tensor

__all__ = ["CrossModalSegmenter", "Tensor"]
__version__ = "0.1.0"
