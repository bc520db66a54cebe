"""Adversarial attacks on a small sequence-generating OCR model."""

__version__ = "0.1.0"
