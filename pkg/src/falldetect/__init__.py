"""Ensemble coarse-fine CNN + GRU fall detection, built on hand-written numpy layers."""

from .models import ModelKind, build_model, predict
from .tensor import SeededRng

__all__ = ["ModelKind", "SeededRng", "build_model", "predict"]
__version__ = "0.1.0"
