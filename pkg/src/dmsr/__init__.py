"""Depth map super-resolution by learned joint image filtering."""

from .model import DmsrModel, ModelConfig, KernelField
from .tensor import Tensor, Tape

__all__ = ["DmsrModel", "ModelConfig", "KernelField", "Tensor", "Tape"]
__version__ = "0.1.0"
