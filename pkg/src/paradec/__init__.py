"""Parallel fixed-point decoding for a toy transformer, with consistency distillation."""

__version__ = "0.1.0"
