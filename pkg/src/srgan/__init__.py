"""Numpy implementation of residual super-resolution networks (SRResNet / SRGAN)."""

__version__ = "0.1.0"
