"""Frequency dynamic convolution + large kernel attention CRNN for sound event detection."""

__version__ = "0.1.0"
