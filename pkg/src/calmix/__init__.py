"""Calibration-aware data augmentation for small ensembles, in numpy."""

__version__ = "0.1.0"
