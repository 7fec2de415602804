"""Quantum-informed machine learning for chaotic field dynamics."""

__version__ = "0.1.0"
