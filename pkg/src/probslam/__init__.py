"""Confidence-weighted bundle adjustment driven by detection probability maps."""

__version__ = "0.1.0"
