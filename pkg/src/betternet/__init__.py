"""Residual-decoder polyp segmentation kit with its own autodiff engine."""

__version__ = "0.1.0"
