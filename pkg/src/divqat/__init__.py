"""Quantization-aware training with a divergence term, plus extraction attacks and defenses."""
from .kernels import BACKEND

__version__ = "0.1.0"
