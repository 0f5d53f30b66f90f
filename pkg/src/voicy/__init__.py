"""Noise-robust zero-shot voice conversion at desk scale."""

__version__ = "0.1.0"
