"""Backward knowledge distillation: auxiliary samples from input-space divergence ascent."""

__version__ = "0.1.0"
