"""Ladder algorithm: detect a chain of repetitive structures one instance at a time."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
