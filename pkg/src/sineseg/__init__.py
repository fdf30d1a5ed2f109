"""Sine-normalized CT/PET lesion segmentation pipeline.

Subpackages cover the volume I/O layer, intensity preprocessing, the
periodic sine transform and channel assembly, a residual-encoder 3D U-Net
with deep supervision, the training recipe, and the budget-aware
sliding-window + TTA inference engine.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
