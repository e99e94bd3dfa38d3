"""Encouraging-loss laboratory: loss family, a from-scratch MLP trainer and
the margin / energy / calibration / OOD / robustness diagnostics around it."""

__version__ = "0.1.0"
