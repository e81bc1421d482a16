"""Desk-scale U-Net cloud masking benchmark on a numpy autodiff engine."""

__version__ = "0.1.0"
