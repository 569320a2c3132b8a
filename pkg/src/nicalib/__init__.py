"""Calibrating historical treatment effects to a noninferiority trial's population."""

__version__ = "0.1.0"
