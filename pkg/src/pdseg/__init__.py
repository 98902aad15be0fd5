"""Pseudo-depth aggregation and noise-schedule fusion for toy semantic
segmentation, on a small numpy reverse-mode autodiff core."""

from .tensor import (Tensor, NumericError, DimensionError, ConfigError,  # noqa: F401
                     no_grad)

__version__ = "0.1.0"
