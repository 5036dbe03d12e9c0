"""Camera-IMU road surface classification with cross-attention fusion."""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
