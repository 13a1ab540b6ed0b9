"""Attribute-controlled generation by learning small transforms of a frozen LM's final hidden state."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
