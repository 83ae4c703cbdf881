"""Appearance-robust local feature training and evaluation toolkit."""

__version__ = "0.1.0"
