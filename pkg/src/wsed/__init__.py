"""Weakly-labelled, semi-supervised sound event detection."""

__version__ = "0.1.0"
