"""Introspective failure prediction for stereo obstacle detection, on a synthetic desk-scale world."""

__version__ = "0.1.0"
