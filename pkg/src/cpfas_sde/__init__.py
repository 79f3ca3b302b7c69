"""Conditional particle smoothing over SDEs and distillation into a neural drift."""

__version__ = "0.1.0"
