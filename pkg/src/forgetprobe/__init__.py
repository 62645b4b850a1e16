"""Measure catastrophic forgetting in discriminative vs. generative representations."""

__version__ = "0.1.0"
