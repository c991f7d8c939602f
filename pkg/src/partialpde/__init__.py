"""Operator learning for partially observed PDE fields."""

from . import tensor

__all__ = ["tensor"]
__version__ = "0.1.0"
