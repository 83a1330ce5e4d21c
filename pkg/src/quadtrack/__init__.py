"""Desk-scale quadruped motion retargeting, tracking and generator-feedback training."""

__version__ = "0.1.0"
