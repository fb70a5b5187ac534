"""Lip-to-speech synthesis with discrete speech units and a multi-input vocoder."""

__version__ = "0.1.0"
