"""Desk-scale score distillation through tractable diffusion bridges."""

__version__ = "0.1.0"
