"""RGB-D object detection with multimodal redundancy.

Soft-gate fusion of RGB and depth feature pyramids, modality-dropout
("dynamic ensemble") training, and a label-free multimodal consistency
score for judging how much an output can be trusted.
"""
from redundet.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
