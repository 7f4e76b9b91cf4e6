"""Bit-accurate fixed-point golden model of a lightweight railway-defect CNN accelerator."""

__version__ = "0.1.0"
